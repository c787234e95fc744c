//! Impact functions, parametric kernels, admissibility and execution costs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelTensor;
use crate::linalg::{min_eigenvalue_sym, sym_part};

/// `sgn(x)·|x|^c`.
pub fn impact_h(c: f64, x: f64) -> Result<f64> {
    check_exponent("c", c)?;
    Ok(power_sign(c, x))
}

#[inline]
pub(crate) fn power_sign(c: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if c == 1.0 {
        x
    } else {
        x.signum() * x.abs().powf(c)
    }
}

/// Checks that a concavity exponent lies in `(0, 1]`.
pub fn check_exponent(name: &'static str, c: f64) -> Result<()> {
    if c > 0.0 && c <= 1.0 {
        Ok(())
    } else {
        Err(Error::out_of_range(name, format!("{c} is not in (0, 1]")))
    }
}

/// The concave transform `h_c` applied to traded volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactFunction {
    c: f64,
}

impl ImpactFunction {
    pub fn new(c: f64) -> Result<Self> {
        check_exponent("c", c)?;
        Ok(Self { c })
    }

    pub fn linear() -> Self {
        Self { c: 1.0 }
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        power_sign(self.c, x)
    }

    pub fn is_linear(&self) -> bool {
        self.c == 1.0
    }
}

/// Separate exponents for self-impact (`k == l`) and cross-impact columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concavity {
    pub c_self: f64,
    pub c_cross: f64,
}

impl Concavity {
    pub fn new(c_self: f64, c_cross: f64) -> Result<Self> {
        check_exponent("c_self", c_self)?;
        check_exponent("c_cross", c_cross)?;
        Ok(Self { c_self, c_cross })
    }

    pub fn uniform(c: f64) -> Result<Self> {
        Self::new(c, c)
    }

    #[inline]
    pub fn exponent(&self, l: usize, k: usize) -> f64 {
        if l == k {
            self.c_self
        } else {
            self.c_cross
        }
    }

    #[inline]
    pub fn apply(&self, l: usize, k: usize, x: f64) -> f64 {
        power_sign(self.exponent(l, k), x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    OneExp,
    TwoExp,
    Power,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "1exp" | "oneexp" => Ok(Self::OneExp),
            "2exp" | "twoexp" => Ok(Self::TwoExp),
            "power" => Ok(Self::Power),
            other => Err(Error::InvalidInput(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Decay shape of a parametric kernel, with time measured in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Decay {
    OneExp { rho: f64 },
    TwoExp { w1: f64, rho1: f64, rho2: f64 },
    Power { beta: f64, tau: f64 },
}

impl Decay {
    pub fn family(&self) -> KernelFamily {
        match self {
            Decay::OneExp { .. } => KernelFamily::OneExp,
            Decay::TwoExp { .. } => KernelFamily::TwoExp,
            Decay::Power { .. } => KernelFamily::Power,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Decay::OneExp { rho } => (-rho * t).exp(),
            Decay::TwoExp { w1, rho1, rho2 } => {
                w1 * (-rho1 * t).exp() + (1.0 - w1) * (-rho2 * t).exp()
            }
            Decay::Power { beta, tau } => (t + tau).powf(-beta),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::out_of_range(name, format!("{v} must be > 0")))
            }
        };
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::out_of_range(name, format!("{v} is not in [0, 1]")))
            }
        };
        match *self {
            Decay::OneExp { rho } => positive("rho", rho),
            Decay::TwoExp { w1, rho1, rho2 } => {
                unit("w1", w1)?;
                positive("rho1", rho1)?;
                positive("rho2", rho2)
            }
            Decay::Power { beta, tau } => {
                unit("beta", beta)?;
                positive("tau", tau)
            }
        }
    }
}

/// A parametric propagator `Y · decay(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricKernel {
    pub y: f64,
    #[serde(flatten)]
    pub decay: Decay,
}

impl ParametricKernel {
    pub fn new(y: f64, decay: Decay) -> Result<Self> {
        if !y.is_finite() {
            return Err(Error::out_of_range("Y", "must be finite"));
        }
        decay.validate()?;
        Ok(Self { y, decay })
    }

    pub fn one_exp(y: f64, rho: f64) -> Result<Self> {
        Self::new(y, Decay::OneExp { rho })
    }

    pub fn two_exp(y: f64, w1: f64, rho1: f64, rho2: f64) -> Result<Self> {
        Self::new(y, Decay::TwoExp { w1, rho1, rho2 })
    }

    pub fn power(y: f64, beta: f64, tau: f64) -> Result<Self> {
        Self::new(y, Decay::Power { beta, tau })
    }

    pub fn family(&self) -> KernelFamily {
        self.decay.family()
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.y, self.decay).map(|_| ())
    }
}

/// `Y e^{−ρt}`, `Y (w₁e^{−ρ₁t} + (1−w₁)e^{−ρ₂t})` or `Y (t+τ)^{−β}`.
pub fn eval_parametric(k: &ParametricKernel, lag_seconds: f64) -> f64 {
    k.y * k.decay.eval(lag_seconds)
}

/// A kernel that can be evaluated at any nonnegative lag in seconds.
pub trait KernelFn {
    fn eval(&self, lag_seconds: f64) -> f64;
}

impl KernelFn for ParametricKernel {
    fn eval(&self, lag_seconds: f64) -> f64 {
        eval_parametric(self, lag_seconds)
    }
}

/// Piecewise-linear interpolation of one pair of a discrete tensor, constant
/// past the last lag.
#[derive(Debug, Clone)]
pub struct InterpolatedKernel {
    values: Vec<f64>,
    bin_seconds: f64,
}

impl InterpolatedKernel {
    pub fn from_tensor(k: &KernelTensor, l: usize, j: usize, bin_seconds: f64) -> Result<Self> {
        if k.m() == 0 || bin_seconds <= 0.0 {
            return Err(Error::InvalidInput(
                "interpolation needs at least one lag and a positive bin width".into(),
            ));
        }
        Ok(Self {
            values: k.pair_series(l, j),
            bin_seconds,
        })
    }
}

impl KernelFn for InterpolatedKernel {
    fn eval(&self, lag_seconds: f64) -> f64 {
        let x = (lag_seconds / self.bin_seconds).max(0.0);
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().expect("non-empty");
        }
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

/// Samples a `d × d` grid of parametric kernels at lags `i · bin_seconds`.
pub fn sample_to_tensor(
    kernels: &[Vec<ParametricKernel>],
    bin_seconds: f64,
    m: usize,
) -> Result<KernelTensor> {
    let d = kernels.len();
    if kernels.iter().any(|row| row.len() != d) {
        return Err(Error::DimensionMismatch("kernel grid must be d × d".into()));
    }
    for k in kernels.iter().flatten() {
        k.validate()?;
    }
    Ok(
        KernelTensor::from_fn(m, d, |i, l, k| eval_parametric(&kernels[l][k], i as f64 * bin_seconds))
            .with_bin_seconds(bin_seconds),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub nonneg: bool,
    pub nonincreasing: bool,
    pub convex: bool,
    /// Most negative eigenvalue found for each family (0 when none is negative).
    pub worst_nonneg: f64,
    pub worst_nonincreasing: f64,
    pub worst_convex: f64,
}

impl AdmissibilityReport {
    pub fn all(&self) -> bool {
        self.nonneg && self.nonincreasing && self.convex
    }
}

/// The three constraint maps defining the admissible cone, evaluated at lag `i`.
pub(crate) fn constraint_family(k: &KernelTensor, family: usize, i: usize) -> DMatrix<f64> {
    match family {
        0 => k.lag_matrix(i),
        1 => k.lag_matrix(i) - k.lag_matrix(i + 1),
        _ => k.lag_matrix(i) - k.lag_matrix(i + 1) * 2.0 + k.lag_matrix(i + 2),
    }
}

/// PSD tests on the symmetric parts of `G_i`, `G_i − G_{i+1}` and
/// `G_i − 2G_{i+1} + G_{i+2}`.
pub fn admissibility_check(k: &KernelTensor, tol: f64) -> AdmissibilityReport {
    let m = k.m();
    let mut worst = [0.0f64; 3];
    for (family, slot) in worst.iter_mut().enumerate() {
        for i in 0..m.saturating_sub(family) {
            let lam = min_eigenvalue_sym(&sym_part(&constraint_family(k, family, i)));
            *slot = slot.min(lam);
        }
    }
    AdmissibilityReport {
        nonneg: worst[0] >= -tol,
        nonincreasing: worst[1] >= -tol,
        convex: worst[2] >= -tol,
        worst_nonneg: worst[0],
        worst_nonincreasing: worst[1],
        worst_convex: worst[2],
    }
}

/// Signed volumes per time, one entry per asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeSchedule {
    pub times: Vec<f64>,
    pub volumes: Vec<Vec<f64>>,
}

impl TradeSchedule {
    pub fn new(times: Vec<f64>, volumes: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != volumes.len() {
            return Err(Error::DimensionMismatch(
                "one volume vector per time is required".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        if let Some(d) = volumes.first().map(|v| v.len()) {
            if volumes.iter().any(|v| v.len() != d) {
                return Err(Error::DimensionMismatch("ragged volume vectors".into()));
            }
        }
        if !volumes.iter().flatten().any(|&v| v != 0.0) {
            return Err(Error::InvalidInput("schedule has no nonzero volume".into()));
        }
        Ok(Self { times, volumes })
    }

    /// A schedule on the bin grid: entry `i` trades at time `i · bin_seconds`.
    pub fn on_grid(volumes: Vec<Vec<f64>>, bin_seconds: f64) -> Result<Self> {
        let times = (0..volumes.len()).map(|i| i as f64 * bin_seconds).collect();
        Self::new(times, volumes)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn d(&self) -> usize {
        self.volumes.first().map(|v| v.len()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_cost: f64,
    /// Contribution of each `(row, col)` asset pair.
    pub per_pair: Vec<Vec<f64>>,
}

/// `½ Σ_{i,j} Q_iᵀ Ḡ_{i−j} h(Q_j)` on the bin grid, where `Ḡ_0` is the
/// symmetric part of `G_0`, `Ḡ_i = G_i` and `Ḡ_{−i} = G_iᵀ`. Schedule entry
/// `i` is interpreted as bin `i`.
pub fn execution_cost(
    k: &KernelTensor,
    h: &ImpactFunction,
    schedule: &TradeSchedule,
) -> Result<CostReport> {
    let (m, d) = (k.m(), k.d());
    let n = schedule.len();
    if n > m {
        return Err(Error::InvalidInput(format!(
            "schedule has {n} trades but the kernel only has {m} lags"
        )));
    }
    if schedule.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "schedule has {} assets, kernel has {d}",
            schedule.d()
        )));
    }
    let hq: Vec<Vec<f64>> = schedule
        .volumes
        .iter()
        .map(|q| q.iter().map(|&x| h.apply(x)).collect())
        .collect();
    let gbar = |lag: isize, l: usize, j: usize| -> f64 {
        match lag {
            0 => 0.5 * (k.get(0, l, j) + k.get(0, j, l)),
            p if p > 0 => k.get(p as usize, l, j),
            p => k.get((-p) as usize, j, l),
        }
    };
    let mut per_pair = vec![vec![0.0; d]; d];
    for i in 0..n {
        for j in 0..n {
            let lag = i as isize - j as isize;
            for (l, row) in per_pair.iter_mut().enumerate() {
                let qi = schedule.volumes[i][l];
                if qi == 0.0 {
                    continue;
                }
                for (kk, cell) in row.iter_mut().enumerate() {
                    *cell += 0.5 * qi * gbar(lag, l, kk) * hq[j][kk];
                }
            }
        }
    }
    let total_cost = per_pair.iter().flatten().sum();
    Ok(CostReport {
        total_cost,
        per_pair,
    })
}

/// `½ Σ_{i,j} x_i G(|t_i − t_j|) h(x_j)` for a single asset with a
/// continuous-time kernel.
pub fn continuous_cost<K: KernelFn + ?Sized>(
    kernel: &K,
    h: &ImpactFunction,
    times: &[f64],
    volumes: &[f64],
) -> f64 {
    let mut acc = 0.0;
    for (ti, xi) in times.iter().zip(volumes) {
        for (tj, xj) in times.iter().zip(volumes) {
            acc += xi * kernel.eval((ti - tj).abs()) * h.apply(*xj);
        }
    }
    0.5 * acc
}

/// Peak impact `Y σ_D sgn(Q) |Q/V_D|^δ`.
pub fn peak_impact(y: f64, sigma_d: f64, v_d: f64, q: f64, delta_exp: f64) -> Result<f64> {
    if v_d <= 0.0 {
        return Err(Error::out_of_range("V_D", format!("{v_d} must be > 0")));
    }
    if sigma_d <= 0.0 {
        return Err(Error::out_of_range("sigma_D", format!("{sigma_d} must be > 0")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    Ok(y * sigma_d * q.signum() * (q / v_d).abs().powf(delta_exp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn impact_h_examples() {
        assert_eq!(impact_h(1.0, -3.0).unwrap(), -3.0);
        assert_eq!(impact_h(0.5, 4.0).unwrap(), 2.0);
        assert_eq!(impact_h(0.5, -4.0).unwrap(), -2.0);
        assert!(impact_h(0.0, 1.0).is_err());
        assert!(impact_h(1.5, 1.0).is_err());
    }

    #[test]
    fn parametric_examples() {
        let k = ParametricKernel::one_exp(1.0, std::f64::consts::LN_2 / 60.0).unwrap();
        assert!((eval_parametric(&k, 60.0) - 0.5).abs() < 1e-15);

        let p = ParametricKernel::power(1.0, 0.0, 5.0).unwrap();
        for t in [0.0, 1.0, 1e5] {
            assert_eq!(eval_parametric(&p, t), 1.0);
        }

        let two = ParametricKernel::two_exp(2.0, 1.0, 0.01, 0.3).unwrap();
        let one = ParametricKernel::one_exp(2.0, 0.01).unwrap();
        for t in [0.0, 3.0, 100.0, 4000.0] {
            assert_eq!(eval_parametric(&two, t), eval_parametric(&one, t));
        }
    }

    #[test]
    fn parametric_rejects_invalid() {
        assert!(ParametricKernel::one_exp(1.0, 0.0).is_err());
        assert!(ParametricKernel::two_exp(1.0, 1.5, 0.1, 0.2).is_err());
        assert!(ParametricKernel::power(1.0, 0.5, 0.0).is_err());
        assert!(ParametricKernel::power(f64::NAN, 0.5, 1.0).is_err());
    }

    #[test]
    fn sampling_examples() {
        let rho = std::f64::consts::LN_2 / 60.0;
        let k = ParametricKernel::one_exp(3.0, rho).unwrap();
        let t = sample_to_tensor(&[vec![k]], 60.0, 3).unwrap();
        let got = t.pair_series(0, 0);
        for (g, e) in got.iter().zip([3.0, 1.5, 0.75]) {
            assert!((g - e).abs() < 1e-14);
        }

        let single = sample_to_tensor(&[vec![k]], 60.0, 1).unwrap();
        assert_eq!(single.m(), 1);
        assert_eq!(single.get(0, 0, 0), 3.0);

        let zero = ParametricKernel::one_exp(0.0, rho).unwrap();
        let grid = vec![vec![k, zero], vec![zero, k]];
        let t2 = sample_to_tensor(&grid, 60.0, 4).unwrap();
        for i in 0..4 {
            assert_eq!(t2.get(i, 0, 1), 0.0);
            assert_eq!(t2.get(i, 1, 0), 0.0);
            assert!(t2.get(i, 0, 0) > 0.0);
        }
    }

    #[test]
    fn admissibility_examples() {
        let ok = KernelTensor::from_vec(3, 1, &[3.0, 2.0, 1.5]).unwrap();
        assert!(admissibility_check(&ok, 0.0).all());

        let bump = KernelTensor::from_vec(3, 1, &[1.0, 2.0, 1.0]).unwrap();
        let r = admissibility_check(&bump, 0.0);
        assert!(!r.nonincreasing);
        assert_eq!(r.worst_nonincreasing, -1.0);

        let expo = KernelTensor::from_fn(6, 2, |i, l, k| if l == k { (-(i as f64)).exp() } else { 0.0 });
        assert!(admissibility_check(&expo, 0.0).all());
    }

    #[test]
    fn admissibility_uses_symmetric_part() {
        // Antisymmetric off-diagonals do not affect any quadratic form.
        let g = KernelTensor::from_fn(3, 2, |i, l, k| match (l, k) {
            (0, 1) => 5.0,
            (1, 0) => -5.0,
            _ => 3.0 - i as f64 * 0.5,
        });
        assert!(admissibility_check(&g, 0.0).all());
    }

    #[test]
    fn cost_examples() {
        let h = ImpactFunction::new(0.5).unwrap();
        let g = KernelTensor::from_vec(2, 1, &[2.0, 1.0]).unwrap();
        let s = TradeSchedule::on_grid(vec![vec![4.0]], 1.0).unwrap();
        let c = execution_cost(&g, &h, &s).unwrap();
        assert!((c.total_cost - 0.5 * 2.0 * 4.0 * 2.0).abs() < 1e-14);

        let lin = ImpactFunction::linear();
        let perm = KernelTensor::from_vec(2, 1, &[1.0, 1.0]).unwrap();
        let rt = TradeSchedule::on_grid(vec![vec![1.0], vec![-1.0]], 1.0).unwrap();
        assert_eq!(execution_cost(&perm, &lin, &rt).unwrap().total_cost, 0.0);

        let too_long = TradeSchedule::on_grid(vec![vec![1.0]; 3], 1.0).unwrap();
        assert!(execution_cost(&perm, &lin, &too_long).is_err());
    }

    #[test]
    fn cost_scales_linearly_and_pairs_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = KernelTensor::from_fn(4, 2, |_, _, _| rng.random_range(-1.0..1.0));
        let h = ImpactFunction::new(0.6).unwrap();
        let vols = (0..4)
            .map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let s = TradeSchedule::on_grid(vols, 1.0).unwrap();
        let c = execution_cost(&g, &h, &s).unwrap();
        let c3 = execution_cost(&g.scaled(3.0), &h, &s).unwrap();
        assert!((c3.total_cost - 3.0 * c.total_cost).abs() < 1e-12 * (1.0 + c.total_cost.abs()));
        let sum: f64 = c.per_pair.iter().flatten().sum();
        assert!((sum - c.total_cost).abs() <= 1e-10 * c.total_cost.abs().max(1e-300));
    }

    #[test]
    fn peak_impact_examples() {
        assert_eq!(peak_impact(1.0, 1.0, 100.0, 0.0, 0.5).unwrap(), 0.0);
        assert!((peak_impact(1.0, 1.0, 100.0, 25.0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            peak_impact(0.7, 2.0, 50.0, -10.0, 0.6).unwrap(),
            -peak_impact(0.7, 2.0, 50.0, 10.0, 0.6).unwrap()
        );
        assert!(peak_impact(1.0, 1.0, 0.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn interpolation_hits_grid_points() {
        let t = KernelTensor::from_vec(3, 1, &[1.0, 0.5, 0.25]).unwrap();
        let f = InterpolatedKernel::from_tensor(&t, 0, 0, 10.0).unwrap();
        assert_eq!(f.eval(0.0), 1.0);
        assert_eq!(f.eval(10.0), 0.5);
        assert!((f.eval(5.0) - 0.75).abs() < 1e-15);
        assert_eq!(f.eval(1e6), 0.25);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        // No manipulation with linear impact for nonneg, nonincreasing, convex kernels.
        #[test]
        fn linear_cost_nonnegative_for_admissible_family(
            y in 0.01f64..5.0,
            rho in 1e-4f64..1.0,
            beta in 0.0f64..1.0,
            tau in 0.1f64..100.0,
            use_power in any::<bool>(),
            vols in proptest::collection::vec(-10.0f64..10.0, 1..12),
        ) {
            let k = if use_power {
                ParametricKernel::power(y, beta, tau).unwrap()
            } else {
                ParametricKernel::one_exp(y, rho).unwrap()
            };
            let t = sample_to_tensor(&[vec![k]], 1.0, 12).unwrap();
            let s = TradeSchedule::on_grid(vols.iter().map(|&v| vec![v]).collect(), 1.0);
            prop_assume!(s.is_ok());
            let c = execution_cost(&t, &ImpactFunction::linear(), &s.unwrap()).unwrap();
            prop_assert!(c.total_cost >= -1e-10);
        }

        #[test]
        fn impact_h_is_odd_and_increasing(c in 0.01f64..=1.0, a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let h = ImpactFunction::new(c).unwrap();
            prop_assert_eq!(h.apply(-a), -h.apply(a));
            if a < b {
                prop_assert!(h.apply(a) <= h.apply(b));
            }
        }
    }
}
