//! Regression operators, streaming normal equations and the ridge estimate.
//!
//! For target asset `ℓ` the regression of its returns on past transformed
//! volumes is `y_ℓ = D_ℓ · g_ℓ + ε`, where `g_ℓ` holds `G_i^{(ℓ,k)}` for all
//! lags `i` and sources `k`, and `D_ℓ` is the `M × (M·d)` lower-triangular
//! block-Toeplitz matrix with entry `(i, (m, k)) = h_{c(ℓ,k)}(q_k[i − m])`.
//! The full operator is block diagonal over `ℓ`, so the Gram matrix is too.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impact::Concavity;
use crate::kernel::KernelTensor;
use crate::linalg::{BlockCholesky, BlockDiagonal};
use crate::market_data::NormalizedEpisode;

/// Episodes handled by one parallel work item. Fixed so the floating-point
/// summation order, and hence the result, does not depend on thread count.
const CHUNK: usize = 32;

/// Transformed volumes of one episode, ready to be applied as `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignOperator {
    m: usize,
    d: usize,
    /// `x[ℓ][k][j] = h_{c(ℓ,k)}(q_k[j])`.
    x: Vec<Vec<Vec<f64>>>,
}

pub fn build_design(ep: &NormalizedEpisode, concavity: &Concavity) -> DesignOperator {
    let (m, d) = (ep.m(), ep.d());
    let raw: Vec<Vec<f64>> = (0..d).map(|k| ep.volume_series(k)).collect();
    let x = (0..d)
        .map(|l| {
            (0..d)
                .map(|k| raw[k].iter().map(|&q| concavity.apply(l, k, q)).collect())
                .collect()
        })
        .collect();
    DesignOperator { m, d, x }
}

impl DesignOperator {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Transformed volume series of source `k` as seen by target `l`.
    pub fn transformed(&self, l: usize, k: usize) -> &[f64] {
        &self.x[l][k]
    }

    /// The dense `M × (M·d)` block `D_ℓ`.
    pub fn block_dense(&self, l: usize) -> DMatrix<f64> {
        let (m, d) = (self.m, self.d);
        let mut out = DMatrix::zeros(m, m * d);
        for i in 0..m {
            for lag in 0..=i {
                for k in 0..d {
                    out[(i, lag * d + k)] = self.x[l][k][i - lag];
                }
            }
        }
        out
    }

    /// Predicted cumulative returns `ŷ[i][ℓ] = Σ_{m ≤ i} Σ_k G_m^{(ℓ,k)} x_ℓk[i − m]`.
    pub fn apply(&self, g: &KernelTensor) -> Result<Vec<Vec<f64>>> {
        if g.m() != self.m || g.d() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "kernel is M={}, d={} but episode is M={}, d={}",
                g.m(),
                g.d(),
                self.m,
                self.d
            )));
        }
        let mut y = vec![vec![0.0; self.d]; self.m];
        for (i, row) in y.iter_mut().enumerate() {
            for (l, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for lag in 0..=i {
                    for k in 0..self.d {
                        acc += g.get(lag, l, k) * self.x[l][k][i - lag];
                    }
                }
                *out = acc;
            }
        }
        Ok(y)
    }
}

/// How the ridge penalty is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpec {
    /// `factor · trace(Σ UᵀU) / (M·d²)`; falls back to 1 when the trace is zero.
    Auto { factor: f64 },
    Uniform(f64),
    /// `λ^{(ℓ,k)}` indexed `[ℓ][k]`.
    PerPair(Vec<Vec<f64>>),
}

impl Default for LambdaSpec {
    fn default() -> Self {
        LambdaSpec::Auto { factor: 1e-3 }
    }
}

/// Running sums of the normal equations, kept without the ridge term.
#[derive(Debug, Clone, PartialEq)]
pub struct GramState {
    m: usize,
    d: usize,
    concavity: Concavity,
    pub lambda: LambdaSpec,
    /// `Σ D_ℓᵀ D_ℓ`, one `(M·d) × (M·d)` block per target asset.
    gram: Vec<DMatrix<f64>>,
    /// `Σ D_ℓᵀ y_ℓ`.
    moments: Vec<DVector<f64>>,
    /// `Σ y²` and `Σ y` per target asset.
    y_sq: Vec<f64>,
    y_sum: Vec<f64>,
    n_episodes: usize,
}

impl GramState {
    pub fn new(m: usize, d: usize, concavity: Concavity, lambda: LambdaSpec) -> Self {
        let p = m * d;
        Self {
            m,
            d,
            concavity,
            lambda,
            gram: vec![DMatrix::zeros(p, p); d],
            moments: vec![DVector::zeros(p); d],
            y_sq: vec![0.0; d],
            y_sum: vec![0.0; d],
            n_episodes: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.m * self.d * self.d
    }

    pub fn concavity(&self) -> Concavity {
        self.concavity
    }

    pub fn n_episodes(&self) -> usize {
        self.n_episodes
    }

    /// Number of scalar observations `N · M · d`.
    pub fn n_observations(&self) -> usize {
        self.n_episodes * self.m * self.d
    }

    pub fn accumulate(&mut self, ep: &NormalizedEpisode) -> Result<()> {
        if ep.m() != self.m || ep.d() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "episode `{}` is M={}, d={} but the state is M={}, d={}",
                ep.id,
                ep.m(),
                ep.d(),
                self.m,
                self.d
            )));
        }
        let design = build_design(ep, &self.concavity);
        let same_blocks = self.concavity.c_self == self.concavity.c_cross;
        let mut shared: Option<DMatrix<f64>> = None;
        for l in 0..self.d {
            let block = match (&shared, same_blocks) {
                (Some(b), true) => b.clone(),
                _ => {
                    let b = toeplitz_gram(&design.x[l], self.m);
                    if same_blocks {
                        shared = Some(b.clone());
                    }
                    b
                }
            };
            self.gram[l] += block;
            let y = ep.return_series(l);
            let mom = &mut self.moments[l];
            for lag in 0..self.m {
                for k in 0..self.d {
                    let xs = &design.x[l][k];
                    let s: f64 = (lag..self.m).map(|i| xs[i - lag] * y[i]).sum();
                    mom[lag * self.d + k] += s;
                }
            }
            self.y_sq[l] += y.iter().map(|v| v * v).sum::<f64>();
            self.y_sum[l] += y.iter().sum::<f64>();
        }
        self.n_episodes += 1;
        Ok(())
    }

    /// Accumulates many episodes in parallel; the result does not depend on
    /// the number of worker threads.
    pub fn accumulate_all(&mut self, episodes: &[NormalizedEpisode]) -> Result<()> {
        let template = Self::new(self.m, self.d, self.concavity, self.lambda.clone());
        let partials = episodes
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut st = template.clone();
                for ep in chunk {
                    st.accumulate(ep)?;
                }
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        for p in &partials {
            self.merge(p)?;
        }
        Ok(())
    }

    pub fn from_episodes(
        episodes: &[NormalizedEpisode],
        m: usize,
        d: usize,
        concavity: Concavity,
        lambda: LambdaSpec,
    ) -> Result<Self> {
        let mut st = Self::new(m, d, concavity, lambda);
        st.accumulate_all(episodes)?;
        Ok(st)
    }

    /// Adds another state's sums. The ridge specification of `self` is kept.
    pub fn merge(&mut self, other: &GramState) -> Result<()> {
        if other.m != self.m || other.d != self.d || other.concavity != self.concavity {
            return Err(Error::DimensionMismatch(
                "cannot merge Gram states with different M, d or concavity".into(),
            ));
        }
        for l in 0..self.d {
            self.gram[l] += &other.gram[l];
            self.moments[l] += &other.moments[l];
            self.y_sq[l] += other.y_sq[l];
            self.y_sum[l] += other.y_sum[l];
        }
        self.n_episodes += other.n_episodes;
        Ok(())
    }

    /// `Σ UᵀU` without regularization.
    pub fn gram(&self) -> BlockDiagonal {
        BlockDiagonal::new(self.gram.clone())
    }

    /// `Σ Uᵀy`, stacked in the flat kernel order.
    pub fn moment(&self) -> DVector<f64> {
        let p = self.m * self.d;
        let mut out = DVector::zeros(self.dim());
        for (l, mom) in self.moments.iter().enumerate() {
            out.rows_mut(l * p, p).copy_from(mom);
        }
        out
    }

    pub fn gram_trace(&self) -> f64 {
        self.gram.iter().map(|b| b.trace()).sum()
    }

    /// The resolved `λ^{(ℓ,k)}` grid.
    pub fn lambda_grid(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.d;
        let grid = match &self.lambda {
            LambdaSpec::Auto { factor } => {
                let trace = self.gram_trace();
                let v = if trace > 0.0 {
                    factor * trace / self.dim() as f64
                } else {
                    1.0
                };
                vec![vec![v; d]; d]
            }
            LambdaSpec::Uniform(v) => vec![vec![*v; d]; d],
            LambdaSpec::PerPair(g) => {
                if g.len() != d || g.iter().any(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch(format!("lambda grid must be {d} × {d}")));
                }
                g.clone()
            }
        };
        if grid.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::out_of_range("lambda", "every entry must be finite and > 0"));
        }
        Ok(grid)
    }

    /// The uniform λ, or `None` when the grid is not constant.
    pub fn uniform_lambda(&self) -> Result<Option<f64>> {
        let grid = self.lambda_grid()?;
        let first = grid[0][0];
        Ok(grid.iter().flatten().all(|&v| v == first).then_some(first))
    }

    /// `W = Σ UᵀU + Λ`.
    pub fn weight_matrix(&self) -> Result<BlockDiagonal> {
        let grid = self.lambda_grid()?;
        let d = self.d;
        let blocks = self
            .gram
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let mut w = b.clone();
                for j in 0..w.nrows() {
                    w[(j, j)] += grid[l][j % d];
                }
                w
            })
            .collect();
        Ok(BlockDiagonal::new(blocks))
    }

    /// In-sample residual sum of squares `Σ ‖y − U g‖²` of a kernel.
    pub fn residual_sum_of_squares(&self, g: &KernelTensor) -> Result<f64> {
        self.check_kernel(g)?;
        let v = DVector::from_vec(g.to_vec());
        let rss = self.y_sq.iter().sum::<f64>() - 2.0 * v.dot(&self.moment()) + self.gram().quad_form(&v);
        Ok(rss.max(0.0))
    }

    /// Total sum of squares about the pooled mean.
    pub fn total_sum_of_squares(&self) -> f64 {
        let n = self.n_observations() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let s: f64 = self.y_sum.iter().sum();
        self.y_sq.iter().sum::<f64>() - s * s / n
    }

    fn check_kernel(&self, g: &KernelTensor) -> Result<()> {
        if g.m() != self.m || g.d() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "kernel is M={}, d={} but the state is M={}, d={}",
                g.m(),
                g.d(),
                self.m,
                self.d
            )));
        }
        Ok(())
    }
}

/// `D_ℓᵀ D_ℓ` for one episode from the transformed series `x[k]`.
///
/// For lags `m ≤ m'` with `r = m' − m`, the entry for columns `(m, k)` and
/// `(m', k')` is `Σ_{j < M − m'} x_k[j + r] · x_k'[j]`, a prefix sum over `j`
/// that is shared by every pair of lags with the same offset `r`.
fn toeplitz_gram(x: &[Vec<f64>], m: usize) -> DMatrix<f64> {
    let d = x.len();
    let mut out = DMatrix::zeros(m * d, m * d);
    let mut prefix = vec![0.0; m + 1];
    for k in 0..d {
        for kp in 0..d {
            for r in 0..m {
                // prefix[n] = Σ_{j < n} x_k[j + r] x_kp[j], n ≤ M − r
                let len = m - r;
                prefix[0] = 0.0;
                for j in 0..len {
                    prefix[j + 1] = prefix[j] + x[k][j + r] * x[kp][j];
                }
                for mp in r..m {
                    let lag = mp - r;
                    let v = prefix[m - mp];
                    let (a, b) = (lag * d + k, mp * d + kp);
                    out[(a, b)] = v;
                    out[(b, a)] = v;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeDiagnostics {
    /// `max diag(L)² / min diag(L)²` of the Cholesky factor of `W`.
    pub condition_estimate: f64,
    /// `‖W g̃ − b‖ / ‖b‖`.
    pub relative_residual: f64,
    pub lambda: Vec<Vec<f64>>,
    pub n_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeEstimate {
    pub g_raw: KernelTensor,
    pub log_det_w: f64,
    pub half_log_det_w: f64,
    pub diagnostics: RidgeDiagnostics,
}

/// `g̃ = W⁻¹ b` by block Cholesky with iterative refinement.
pub fn solve_ridge(state: &GramState) -> Result<RidgeEstimate> {
    let w = state.weight_matrix()?;
    let chol: BlockCholesky = w.cholesky().map_err(|e| {
        Error::Factorization(format!("{e}; the regularization is too small for this data"))
    })?;
    let b = state.moment();
    let mut g = chol.solve(&b);
    let b_norm = b.norm();
    let mut residual = &b - w.mul_vec(&g);
    for _ in 0..3 {
        if residual.norm() <= 1e-12 * b_norm {
            break;
        }
        g += chol.solve(&residual);
        residual = &b - w.mul_vec(&g);
    }
    let relative_residual = if b_norm > 0.0 { residual.norm() / b_norm } else { 0.0 };
    let g_raw = KernelTensor::from_vec(state.m, state.d, g.as_slice())?;
    if !g_raw.is_finite() {
        return Err(Error::Factorization("ridge solution is not finite".into()));
    }
    let log_det_w = chol.log_det();
    Ok(RidgeEstimate {
        g_raw,
        log_det_w,
        half_log_det_w: 0.5 * log_det_w,
        diagnostics: RidgeDiagnostics {
            condition_estimate: chol.diag_condition_estimate(),
            relative_residual,
            lambda: state.lambda_grid()?,
            n_episodes: state.n_episodes,
        },
    })
}

/// `R·√(2·log(det W / (δ²·λ^{M·d²}))) + λ·‖W^{-1/2} g_ref‖`.
pub fn confidence_radius(state: &GramState, r: f64, delta: f64, g_ref: &KernelTensor) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::out_of_range("R", "must be finite and > 0"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::out_of_range("delta", "must lie in (0, 1)"));
    }
    state.check_kernel(g_ref)?;
    let lambda = state.uniform_lambda()?.ok_or_else(|| {
        Error::InvalidInput("the confidence radius requires a uniform regularization".into())
    })?;
    let chol = state.weight_matrix()?.cholesky()?;
    let p = state.dim() as f64;
    let inner = chol.log_det() - 2.0 * delta.ln() - p * lambda.ln();
    let bias = lambda * chol.inv_sqrt_norm(&DVector::from_vec(g_ref.to_vec()));
    Ok(r * (2.0 * inner.max(0.0)).sqrt() + bias)
}

/// `‖W^{1/2} x‖` for a kernel-shaped vector.
pub fn w_norm(w: &BlockDiagonal, g: &KernelTensor) -> f64 {
    w.quad_form(&DVector::from_vec(g.to_vec())).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impact::impact_h;
    use proptest::prelude::*;

    fn episode(returns: Vec<Vec<f64>>, volumes: Vec<Vec<f64>>) -> NormalizedEpisode {
        NormalizedEpisode {
            id: "e".into(),
            timestamp: 0,
            returns,
            volumes,
        }
    }

    #[test]
    fn two_bin_design() {
        let ep = episode(vec![vec![0.0]; 2], vec![vec![4.0], vec![-9.0]]);
        let c = Concavity::uniform(0.5).unwrap();
        let d = build_design(&ep, &c).block_dense(0);
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, -3.0, 2.0]));
        let zero = episode(vec![vec![0.0; 2]; 3], vec![vec![0.0; 2]; 3]);
        assert!(build_design(&zero, &c).block_dense(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_gram_is_scaled_identity() {
        let m = 4;
        let mut vols = vec![vec![0.0]; m];
        vols[0][0] = 3.0;
        let c = Concavity::uniform(0.7).unwrap();
        let mut st = GramState::new(m, 1, c, LambdaSpec::Uniform(1.0));
        st.accumulate(&episode(vec![vec![1.0]; m], vols)).unwrap();
        let h1 = impact_h(0.7, 3.0).unwrap();
        let expected = DMatrix::<f64>::identity(m, m) * (h1 * h1);
        assert!((st.gram().to_dense() - expected).norm() < 1e-12);
    }

    #[test]
    fn zero_moment_gives_zero_kernel() {
        let c = Concavity::uniform(0.5).unwrap();
        let mut st = GramState::new(3, 2, c, LambdaSpec::Uniform(0.1));
        st.accumulate(&episode(vec![vec![0.0; 2]; 3], vec![vec![1.0, -2.0]; 3])).unwrap();
        let est = solve_ridge(&st).unwrap();
        assert!(est.g_raw.frobenius_norm() == 0.0);
    }

    #[test]
    fn empty_state_radius() {
        let c = Concavity::uniform(0.5).unwrap();
        let lambda = 0.25;
        let st = GramState::new(3, 2, c, LambdaSpec::Uniform(lambda));
        let g = KernelTensor::from_fn(3, 2, |i, l, k| 1.0 / (1 + i + l + k) as f64);
        let delta: f64 = 0.05;
        let got = confidence_radius(&st, 2.0, delta, &g).unwrap();
        let expected = 2.0 * (4.0 * (1.0 / delta).ln()).sqrt() + lambda.sqrt() * g.frobenius_norm();
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn radius_needs_uniform_lambda() {
        let c = Concavity::uniform(0.5).unwrap();
        let st = GramState::new(2, 2, c, LambdaSpec::PerPair(vec![vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert!(confidence_radius(&st, 1.0, 0.1, &KernelTensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn auto_lambda_falls_back_on_empty_data() {
        let c = Concavity::uniform(0.5).unwrap();
        let st = GramState::new(2, 1, c, LambdaSpec::default());
        assert_eq!(st.uniform_lambda().unwrap(), Some(1.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let c = Concavity::uniform(0.5).unwrap();
        let mut st = GramState::new(3, 1, c, LambdaSpec::default());
        assert!(st.accumulate(&episode(vec![vec![0.0]; 2], vec![vec![0.0]; 2])).is_err());
    }

    fn arb_episode(m: usize, d: usize) -> impl Strategy<Value = NormalizedEpisode> {
        (
            proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), m),
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), m),
        )
            .prop_map(|(r, v)| episode(r, v))
    }

    proptest! {
        #[test]
        fn accumulation_is_additive_and_order_free(
            eps in proptest::collection::vec(arb_episode(4, 2), 1..6),
        ) {
            let c = Concavity::new(0.6, 0.9).unwrap();
            let mut forward = GramState::new(4, 2, c, LambdaSpec::Uniform(1.0));
            for e in &eps { forward.accumulate(e).unwrap(); }
            let mut backward = GramState::new(4, 2, c, LambdaSpec::Uniform(1.0));
            for e in eps.iter().rev() { backward.accumulate(e).unwrap(); }
            let diff = (forward.gram().to_dense() - backward.gram().to_dense()).norm();
            prop_assert!(diff <= 1e-10 * (1.0 + forward.gram_trace()));

            let mut twice = GramState::new(4, 2, c, LambdaSpec::Uniform(1.0));
            twice.accumulate(&eps[0]).unwrap();
            twice.accumulate(&eps[0]).unwrap();
            let mut once = GramState::new(4, 2, c, LambdaSpec::Uniform(1.0));
            once.accumulate(&eps[0]).unwrap();
            prop_assert!((twice.gram().to_dense() - once.gram().to_dense() * 2.0).norm() < 1e-10);
            prop_assert!((twice.moment() - once.moment() * 2.0).norm() < 1e-10);
        }

        #[test]
        fn parallel_matches_sequential(eps in proptest::collection::vec(arb_episode(3, 1), 1..80)) {
            let c = Concavity::uniform(0.5).unwrap();
            let mut seq = GramState::new(3, 1, c, LambdaSpec::Uniform(1.0));
            for e in &eps { seq.accumulate(e).unwrap(); }
            let par = GramState::from_episodes(&eps, 3, 1, c, LambdaSpec::Uniform(1.0)).unwrap();
            prop_assert!((seq.gram().to_dense() - par.gram().to_dense()).norm() < 1e-9);
            prop_assert_eq!(par.n_episodes(), eps.len());
        }

        #[test]
        fn rss_matches_direct_residuals(e in arb_episode(3, 2), seed in 0u64..1000) {
            let c = Concavity::new(0.5, 0.8).unwrap();
            let mut st = GramState::new(3, 2, c, LambdaSpec::Uniform(1.0));
            st.accumulate(&e).unwrap();
            let g = KernelTensor::from_fn(3, 2, |i, l, k| ((seed as usize + 7 * i + 3 * l + k) % 5) as f64 * 0.1);
            let pred = build_design(&e, &c).apply(&g).unwrap();
            let direct: f64 = pred.iter().flatten().zip(e.returns.iter().flatten()).map(|(p, y)| (y - p).powi(2)).sum();
            let via_gram = st.residual_sum_of_squares(&g).unwrap();
            prop_assert!((direct - via_gram).abs() <= 1e-9 * (1.0 + direct));
        }
    }
}
