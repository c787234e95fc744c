//! W-metric projection of a raw kernel onto the admissible cone.
//!
//! The cone is `{G : sym(F(G)) ⪰ 0}` for the three linear maps
//! `F₀ = G_i`, `F₁ = G_i − G_{i+1}` and `F₂ = G_i − 2G_{i+1} + G_{i+2}`.
//! Writing `A` for the stacked maps, the projection solves
//! `min ½(g − g̃)ᵀW(g − g̃)` subject to `A g = z`, `z ∈ C`, by ADMM. The
//! `g`-step is a linear solve with `W + ρ·AᵀA`, which is block diagonal in
//! the target asset and is factorized once per penalty value; the `z`-step is
//! a `d × d` eigenvalue clip per lag and family.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{vec_index, KernelTensor};
use crate::linalg::{min_eigenvalue_sym, nnls, sym_part, BlockCholesky, BlockDiagonal};

const FAMILIES: [&[f64]; 3] = [&[1.0], &[1.0, -1.0], &[1.0, -2.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSettings {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// Initial penalty relative to the mean diagonal of `W`.
    pub penalty: f64,
    /// Also require every `G_i` to be symmetric.
    pub symmetric: bool,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            max_iter: 20_000,
            penalty: 1.0,
            symmetric: false,
        }
    }
}

impl ProjectionSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_primal > 0.0 && self.tol_dual > 0.0) {
            return Err(Error::out_of_range("tol", "tolerances must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::out_of_range("max_iter", "must be ≥ 1"));
        }
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(Error::out_of_range("penalty", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub g_proj: KernelTensor,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `(G − G̃)ᵀ W (G − G̃)`.
    pub objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub converged: bool,
}

impl ProjectionResult {
    pub fn report(&self) -> ConvergenceReport {
        ConvergenceReport {
            iterations: self.iterations,
            primal_residual: self.primal_residual,
            dual_residual: self.dual_residual,
            objective: self.objective,
            converged: self.converged,
        }
    }
}

/// Frobenius-nearest PSD matrix to the symmetric part of `a`.
pub fn psd_clip(a: &DMatrix<f64>) -> DMatrix<f64> {
    let s = sym_part(a);
    if s.nrows() == 1 {
        return DMatrix::from_element(1, 1, s[(0, 0)].max(0.0));
    }
    let eig = SymmetricEigen::new(s);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&clipped) * q.transpose()
}

/// The stacked constraint maps on flat kernel vectors.
struct Constraints {
    m: usize,
    d: usize,
    /// Number of lags per family.
    counts: [usize; 3],
}

impl Constraints {
    fn new(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            counts: [m, m.saturating_sub(1), m.saturating_sub(2)],
        }
    }

    fn len(&self) -> usize {
        self.counts.iter().sum::<usize>() * self.d * self.d
    }

    /// Start of `(family, lag)` in the stacked vector; entries follow `(l, k)`.
    fn offset(&self, family: usize, i: usize) -> usize {
        (self.counts[..family].iter().sum::<usize>() + i) * self.d * self.d
    }

    fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        let (m, d) = (self.m, self.d);
        let mut out = DVector::zeros(self.len());
        for (family, coeffs) in FAMILIES.iter().enumerate() {
            for i in 0..self.counts[family] {
                let off = self.offset(family, i);
                for l in 0..d {
                    for k in 0..d {
                        out[off + l * d + k] = coeffs
                            .iter()
                            .enumerate()
                            .map(|(s, c)| c * g[vec_index(m, d, i + s, l, k)])
                            .sum();
                    }
                }
            }
        }
        out
    }

    fn apply_transpose(&self, z: &DVector<f64>) -> DVector<f64> {
        let (m, d) = (self.m, self.d);
        let mut out = DVector::zeros(m * d * d);
        for (family, coeffs) in FAMILIES.iter().enumerate() {
            for i in 0..self.counts[family] {
                let off = self.offset(family, i);
                for l in 0..d {
                    for k in 0..d {
                        let v = z[off + l * d + k];
                        for (s, c) in coeffs.iter().enumerate() {
                            out[vec_index(m, d, i + s, l, k)] += c * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// `T = Σ_f D_fᵀ D_f` on the lag index; `AᵀA = T ⊗ I` over asset pairs.
    fn lag_gram(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.m, self.m);
        for (family, coeffs) in FAMILIES.iter().enumerate() {
            for i in 0..self.counts[family] {
                for (a, ca) in coeffs.iter().enumerate() {
                    for (b, cb) in coeffs.iter().enumerate() {
                        t[(i + a, i + b)] += ca * cb;
                    }
                }
            }
        }
        t
    }

    fn matrix(&self, z: &DVector<f64>, family: usize, i: usize) -> DMatrix<f64> {
        let off = self.offset(family, i);
        DMatrix::from_fn(self.d, self.d, |l, k| z[off + l * self.d + k])
    }

    /// Projects every `d × d` slice onto `{Z : sym(Z) ⪰ 0}`.
    fn project_cone(&self, z: &mut DVector<f64>, symmetric: bool) {
        let d = self.d;
        for family in 0..3 {
            for i in 0..self.counts[family] {
                let a = self.matrix(z, family, i);
                let mut p = psd_clip(&a);
                if !(symmetric && family == 0) {
                    // The antisymmetric part is unconstrained.
                    p += (&a - a.transpose()) * 0.5;
                }
                let off = self.offset(family, i);
                for l in 0..d {
                    for k in 0..d {
                        z[off + l * d + k] = p[(l, k)];
                    }
                }
            }
        }
    }

    /// Largest violation `max(0, −λ_min(sym F))` over all slices of `A g`,
    /// plus the largest asymmetry of `G_i` when symmetry is required.
    fn violation(&self, ag: &DVector<f64>, symmetric: bool) -> f64 {
        let mut worst: f64 = 0.0;
        for family in 0..3 {
            for i in 0..self.counts[family] {
                let a = self.matrix(ag, family, i);
                worst = worst.max(-min_eigenvalue_sym(&sym_part(&a)));
                if symmetric && family == 0 {
                    worst = worst.max((&a - a.transpose()).amax());
                }
            }
        }
        worst
    }
}

fn check_metric(g_raw: &KernelTensor, w: &BlockDiagonal) -> Result<()> {
    let (m, d) = (g_raw.m(), g_raw.d());
    if w.dim() != m * d * d {
        return Err(Error::DimensionMismatch(format!(
            "W has dimension {} but the kernel has {} coefficients",
            w.dim(),
            m * d * d
        )));
    }
    if w.blocks.iter().any(|b| b.nrows() % (m * d) != 0) {
        return Err(Error::DimensionMismatch(
            "W blocks must cover whole target assets".into(),
        ));
    }
    Ok(())
}

fn factorize(w: &BlockDiagonal, t: &DMatrix<f64>, m: usize, d: usize, rho: f64) -> Result<BlockCholesky> {
    let blocks = w
        .blocks
        .iter()
        .map(|b| {
            let mut k = b.clone();
            // Within a block, index = l'·M·d + i·d + k for a local target l'.
            for a in 0..k.nrows() {
                let (la, ia, ka) = (a / (m * d), (a / d) % m, a % d);
                for c in 0..k.ncols() {
                    let (lc, ic, kc) = (c / (m * d), (c / d) % m, c % d);
                    if la == lc && ka == kc {
                        k[(a, c)] += rho * t[(ia, ic)];
                    }
                }
            }
            k
        })
        .collect();
    BlockDiagonal::new(blocks).cholesky()
}

/// A strictly admissible direction: every constraint slice of
/// `G_i = (M − i)²·I` has smallest eigenvalue at least 1.
fn interior_direction(m: usize, d: usize) -> DVector<f64> {
    let g = KernelTensor::from_fn(m, d, |i, l, k| if l == k { ((m - i) * (m - i)) as f64 } else { 0.0 });
    DVector::from_vec(g.to_vec())
}

pub fn project(g_raw: &KernelTensor, w: &BlockDiagonal, settings: &ProjectionSettings) -> Result<ProjectionResult> {
    settings.validate()?;
    check_metric(g_raw, w)?;
    let (m, d) = (g_raw.m(), g_raw.d());
    let cons = Constraints::new(m, d);
    let t = cons.lag_gram();
    let g_tilde = DVector::from_vec(g_raw.to_vec());
    if cons.violation(&cons.apply(&g_tilde), settings.symmetric) <= 0.0 {
        return Ok(ProjectionResult {
            g_proj: g_raw.clone(),
            iterations: 1,
            primal_residual: 0.0,
            dual_residual: 0.0,
            objective: 0.0,
            converged: true,
        });
    }
    let wg_tilde = w.mul_vec(&g_tilde);

    let mean_diag = w.trace() / w.dim().max(1) as f64;
    let mut rho = settings.penalty * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let rho_min = rho * 1e-6;
    let rho_max = rho * 1e6;
    let mut chol = factorize(w, &t, m, d, rho)?;
    const ALPHA: f64 = 1.6;

    let mut g = g_tilde.clone();
    let mut z = cons.apply(&g);
    cons.project_cone(&mut z, settings.symmetric);
    let mut u = DVector::zeros(z.len());
    let (mut r_norm, mut s_norm) = (f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=settings.max_iter {
        iterations = it;
        let rhs = &wg_tilde + cons.apply_transpose(&(&z - &u)) * rho;
        g = chol.solve(&rhs);
        let ag = cons.apply(&g);
        let x_hat = &ag * ALPHA + &z * (1.0 - ALPHA);
        let z_prev = z.clone();
        z = &x_hat + &u;
        cons.project_cone(&mut z, settings.symmetric);
        u += &x_hat - &z;

        r_norm = (&ag - &z).norm();
        let at_u = cons.apply_transpose(&u) * rho;
        s_norm = (cons.apply_transpose(&(&z - &z_prev)) * rho).norm();
        let eps_pri = settings.tol_primal * (1.0 + ag.norm().max(z.norm()));
        let wdiff = w.mul_vec(&(&g - &g_tilde));
        let eps_dual = settings.tol_dual * (1.0 + wdiff.norm().max(at_u.norm()));
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }

        if it % 50 == 0 {
            let rel_r = r_norm / ag.norm().max(z.norm()).max(1e-300);
            let rel_s = s_norm / wdiff.norm().max(at_u.norm()).max(1e-300);
            if rel_r > 0.0 && rel_s > 0.0 {
                let proposal = (rho * (rel_r / rel_s).sqrt()).clamp(rho_min, rho_max);
                if proposal > 5.0 * rho || proposal < rho / 5.0 {
                    u *= rho / proposal;
                    rho = proposal;
                    chol = factorize(w, &t, m, d, rho)?;
                }
            }
        }
    }

    if settings.symmetric {
        let sym = KernelTensor::from_fn(m, d, |i, l, k| {
            0.5 * (g[vec_index(m, d, i, l, k)] + g[vec_index(m, d, i, k, l)])
        });
        g = DVector::from_vec(sym.to_vec());
    }
    // Shift along a strictly admissible direction to remove any residual
    // violation left by the finite tolerance.
    let violation = cons.violation(&cons.apply(&g), false);
    if violation > 0.0 {
        g += interior_direction(m, d) * (violation * (1.0 + 1e-9) + f64::MIN_POSITIVE);
    }

    let diff = &g - &g_tilde;
    let objective = w.quad_form(&diff).max(0.0);
    let mut g_proj = KernelTensor::from_vec(m, d, g.as_slice())?;
    g_proj.bin_seconds = g_raw.bin_seconds;
    g_proj.metadata = g_raw.metadata.clone();
    Ok(ProjectionResult {
        g_proj,
        iterations,
        primal_residual: r_norm,
        dual_residual: s_norm,
        objective,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub g: KernelTensor,
    pub objective: f64,
    /// Largest of constraint violation and complementarity mismatch.
    pub kkt_residual: f64,
}

/// Direct solution of the projection by an active-set method on its dual.
///
/// Each PSD constraint is represented by scalar inequalities `vᵀF v ≥ 0`:
/// exactly for `d = 1`, and for `d = 2` on a net of directions refined by
/// adding the eigenvectors of violated slices until every check passes.
pub fn project_dense_oracle(g_raw: &KernelTensor, w: &BlockDiagonal) -> Result<OracleSolution> {
    let (m, d) = (g_raw.m(), g_raw.d());
    if m * d * d > 200 || d > 2 {
        return Err(Error::out_of_range("size", "the dense oracle needs M·d² ≤ 200 and d ≤ 2"));
    }
    check_metric(g_raw, w)?;
    let cons = Constraints::new(m, d);
    let p = m * d * d;
    let dense_w = w.to_dense();
    let chol = dense_w
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("W is not positive definite".into()))?;
    let l = chol.l();
    let g_tilde = DVector::from_vec(g_raw.to_vec());
    let x0 = l.transpose() * &g_tilde;

    let mut directions: Vec<DVector<f64>> = if d == 1 {
        vec![DVector::from_element(1, 1.0)]
    } else {
        (0..64)
            .map(|j| {
                let th = std::f64::consts::PI * j as f64 / 64.0;
                DVector::from_vec(vec![th.cos(), th.sin()])
            })
            .collect()
    };
    // Rows of C: one per (family, lag, direction), as functionals on g.
    let row = |family: usize, i: usize, v: &DVector<f64>| -> DVector<f64> {
        let mut r = DVector::zeros(p);
        for (s, c) in FAMILIES[family].iter().enumerate() {
            for a in 0..d {
                for b in 0..d {
                    r[vec_index(m, d, i + s, a, b)] += c * v[a] * v[b];
                }
            }
        }
        r
    };
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for family in 0..3 {
        for i in 0..cons.counts[family] {
            for v in &directions {
                rows.push(row(family, i, v));
            }
        }
    }
    directions.clear();

    let mut g = g_tilde.clone();
    let mut mu = DVector::zeros(0);
    let mut c_mat = DMatrix::zeros(0, p);
    for _round in 0..100 {
        c_mat = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
        // Bᵀ = L⁻¹ Cᵀ
        let bt = l
            .solve_lower_triangular(&c_mat.transpose())
            .expect("cholesky factor has a positive diagonal");
        mu = nnls(&bt, &(-&x0), 50 * rows.len().max(10));
        let x = &x0 + &bt * &mu;
        g = l
            .transpose()
            .solve_upper_triangular(&x)
            .expect("cholesky factor has a positive diagonal");
        let ag = cons.apply(&g);
        let mut added = false;
        if d > 1 {
            for family in 0..3 {
                for i in 0..cons.counts[family] {
                    let s = sym_part(&cons.matrix(&ag, family, i));
                    let eig = SymmetricEigen::new(s);
                    let (idx, lam) = eig
                        .eigenvalues
                        .iter()
                        .enumerate()
                        .fold((0, f64::INFINITY), |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc });
                    if lam < -1e-12 {
                        rows.push(row(family, i, &eig.eigenvectors.column(idx).into_owned()));
                        added = true;
                    }
                }
            }
        }
        if !added {
            break;
        }
    }
    let slack = &c_mat * &g;
    let scale = 1.0 + g.amax();
    let kkt_residual = slack
        .iter()
        .zip(mu.iter())
        .map(|(&s, &u)| (-s).max(0.0).max((s * u).abs()))
        .fold(0.0, f64::max)
        / scale;
    let diff = &g - &g_tilde;
    let objective = diff.dot(&(&dense_w * &diff));
    Ok(OracleSolution {
        g: KernelTensor::from_vec(m, d, g.as_slice())?,
        objective,
        kkt_residual,
    })
}
