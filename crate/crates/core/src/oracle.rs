//! Ground-truth optimal control for the linear-quadratic instance.
//!
//! The condensed batch solution stacks the whole horizon into one quadratic
//! program in the controls `U = [u_0, …, u_{N-1}]`:
//!
//! ```text
//! X = T̄ x + S̄ U,   J(U) = Uᵀ R̄ U + Xᵀ Q̄ X,
//! H = 2(R̄ + S̄ᵀ Q̄ S̄),   F = 2 S̄ᵀ Q̄ T̄,   U* = -H⁻¹ F x
//! ```
//!
//! A backward Riccati recursion gives the same first move through an
//! independent route and is used to cross-check it.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::expm;
use crate::ocp::Policy;
use crate::vehicle::LinearDynamics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    Euler,
    Zoh,
}

/// `x_{k+1} = Ad x_k + Bd u_k` with step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLti {
    pub ad: DMatrix<f64>,
    pub bd: DVector<f64>,
    pub h: f64,
}

pub fn continuous_matrices(dynm: &LinearDynamics) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(4, 4, |i, j| dynm.a[i][j]);
    let b = DVector::from_column_slice(&dynm.b);
    (a, b)
}

pub fn discretize(dynm: &LinearDynamics, h: f64, method: Discretization) -> Result<DiscreteLti> {
    let (a, b) = continuous_matrices(dynm);
    discretize_matrices(&a, &b, h, method)
}

pub fn discretize_matrices(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    h: f64,
    method: Discretization,
) -> Result<DiscreteLti> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("discretization step must be positive, got {h}")));
    }
    let n = a.nrows();
    let (ad, bd) = match method {
        Discretization::Euler => (DMatrix::identity(n, n) + a * h, b * h),
        Discretization::Zoh => {
            // exp([[A, B], [0, 0]] h) = [[Ad, Bd], [0, I]]
            let mut m = DMatrix::zeros(n + 1, n + 1);
            m.view_mut((0, 0), (n, n)).copy_from(&(a * h));
            m.view_mut((0, n), (n, 1)).copy_from(&(b * h));
            let e = expm(&m);
            (
                e.view((0, 0), (n, n)).into_owned(),
                DVector::from_iterator(n, e.view((0, n), (n, 1)).iter().copied()),
            )
        }
    };
    Ok(DiscreteLti { ad, bd, h })
}

/// Finite-horizon discrete LQ problem with scalar input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLqProblem {
    pub ad: DMatrix<f64>,
    pub bd: DVector<f64>,
    pub qm: DMatrix<f64>,
    pub rm: f64,
    pub p: DMatrix<f64>,
    pub n: usize,
}

impl BatchLqProblem {
    pub fn new(
        sys: &DiscreteLti,
        qm: DMatrix<f64>,
        rm: f64,
        p: DMatrix<f64>,
        n: usize,
    ) -> Result<Self> {
        let prob = Self {
            ad: sys.ad.clone(),
            bd: sys.bd.clone(),
            qm,
            rm,
            p,
            n,
        };
        prob.validate()?;
        Ok(prob)
    }

    /// Cost `diag(q, 0, …)` on the lateral error, terminal weight equal to
    /// the stage weight.
    pub fn tracking(sys: &DiscreteLti, q: f64, r: f64, n: usize) -> Result<Self> {
        let dim = sys.ad.nrows();
        let mut qm = DMatrix::zeros(dim, dim);
        qm[(0, 0)] = q;
        Self::new(sys, qm.clone(), r, qm, n)
    }

    pub fn state_dim(&self) -> usize {
        self.ad.nrows()
    }

    pub fn with_horizon(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.ad.nrows();
        if self.ad.ncols() != dim || self.bd.len() != dim {
            return Err(Error::Config("Ad must be square and Bd must match it".into()));
        }
        for (name, m) in [("Qm", &self.qm), ("P", &self.p)] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Config(format!("{name} must be {dim}x{dim}")));
            }
            if (m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            let eig = m.clone().symmetric_eigenvalues();
            if eig.iter().any(|&e| e < -1e-12 * (1.0 + m.abs().max())) {
                return Err(Error::Config(format!("{name} must be positive semidefinite")));
            }
        }
        if !(self.rm > 0.0) {
            return Err(Error::Config(format!("Rm must be positive, got {}", self.rm)));
        }
        if self.n == 0 {
            return Err(Error::Config("horizon N must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stacked prediction and cost matrices.
#[derive(Debug, Clone)]
pub struct BatchMatrices {
    /// `nN × N`, block `(i, j) = Ad^{i-j} Bd` for `i ≥ j`.
    pub s_bar: DMatrix<f64>,
    /// `nN × n`, blocks `Ad¹ … Ad^N`.
    pub t_bar: DMatrix<f64>,
    /// `blockdiag(Qm, …, Qm, P)`.
    pub q_bar: DMatrix<f64>,
    /// `Rm · I_N`.
    pub r_bar: DMatrix<f64>,
}

pub fn build_batch_matrices(p: &BatchLqProblem) -> BatchMatrices {
    let n = p.state_dim();
    let steps = p.n;
    let mut powers = Vec::with_capacity(steps + 1);
    powers.push(DMatrix::identity(n, n));
    for k in 1..=steps {
        let next = &p.ad * &powers[k - 1];
        powers.push(next);
    }
    // Ad^k Bd for k = 0..N-1
    let ab: Vec<DVector<f64>> = powers[..steps].iter().map(|pk| pk * &p.bd).collect();
    let mut s_bar = DMatrix::zeros(n * steps, steps);
    let mut t_bar = DMatrix::zeros(n * steps, n);
    let mut q_bar = DMatrix::zeros(n * steps, n * steps);
    for i in 0..steps {
        for j in 0..=i {
            s_bar.view_mut((i * n, j), (n, 1)).copy_from(&ab[i - j]);
        }
        t_bar.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
        let block = if i + 1 == steps { &p.p } else { &p.qm };
        q_bar.view_mut((i * n, i * n), (n, n)).copy_from(block);
    }
    let r_bar = DMatrix::identity(steps, steps) * p.rm;
    BatchMatrices {
        s_bar,
        t_bar,
        q_bar,
        r_bar,
    }
}

/// Factored batch solution; `first_gain` is the row of `-H⁻¹F` that maps a
/// state to the first move.
#[derive(Debug, Clone)]
pub struct BatchLqSolver {
    chol: Cholesky<f64, nalgebra::Dyn>,
    f: DMatrix<f64>,
}

impl BatchLqSolver {
    pub fn new(p: &BatchLqProblem) -> Result<Self> {
        let m = build_batch_matrices(p);
        let qs = &m.q_bar * &m.s_bar;
        let h = (&m.r_bar + m.s_bar.transpose() * &qs) * 2.0;
        let f = qs.transpose() * &m.t_bar * 2.0;
        let chol = Cholesky::new(h).ok_or_else(|| {
            Error::Conditioning("batch Hessian is not numerically positive definite".into())
        })?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        if !(lo > 0.0) || (hi / lo).powi(2) > 1e14 {
            return Err(Error::Conditioning(format!(
                "batch Hessian condition estimate {:.3e}",
                (hi / lo).powi(2)
            )));
        }
        Ok(Self { chol, f })
    }

    /// Optimal control sequence from `x`.
    pub fn solve(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("oracle state", self.f.ncols(), x.len())?;
        let rhs = -(&self.f * DVector::from_column_slice(x));
        Ok(self.chol.solve(&rhs).as_slice().to_vec())
    }

    /// `k` such that `u*_0 = k · x`.
    pub fn first_gain(&self) -> Vec<f64> {
        let mut e0 = DVector::zeros(self.f.nrows());
        e0[0] = 1.0;
        // H symmetric: row 0 of H⁻¹ = (H⁻¹ e0)ᵀ
        let h_inv_e0 = self.chol.solve(&e0);
        (-(h_inv_e0.transpose() * &self.f)).iter().copied().collect()
    }
}

/// Builds, factors and solves the condensed problem in one go.
pub fn batch_lq_solve(p: &BatchLqProblem, x: &[f64]) -> Result<Vec<f64>> {
    p.validate()?;
    BatchLqSolver::new(p)?.solve(x)
}

/// Feedback gains `K_0 … K_{N-1}` (each a row) from the backward recursion.
pub fn riccati_solve(p: &BatchLqProblem) -> Vec<DVector<f64>> {
    let mut pk = p.p.clone();
    let mut gains = vec![DVector::zeros(p.state_dim()); p.n];
    for k in (0..p.n).rev() {
        let pb = &pk * &p.bd;
        let denom = p.rm + p.bd.dot(&pb);
        // K = (Rm + BᵀPB)⁻¹ BᵀPA
        let k_row: DVector<f64> = (p.ad.transpose() * &pb) / denom;
        let bk = &p.bd * k_row.transpose();
        pk = &p.qm + p.ad.transpose() * &pk * (&p.ad - bk);
        pk = (&pk + pk.transpose()) * 0.5;
        gains[k] = k_row;
    }
    gains
}

/// `J(U) = UᵀR̄U + (T̄x + S̄U)ᵀ Q̄ (T̄x + S̄U)` evaluated on the stacked matrices.
pub fn batch_cost(m: &BatchMatrices, x: &[f64], u: &[f64]) -> f64 {
    let u = DVector::from_column_slice(u);
    let states = &m.t_bar * DVector::from_column_slice(x) + &m.s_bar * &u;
    (u.transpose() * &m.r_bar * &u)[0] + (states.transpose() * &m.q_bar * &states)[0]
}

/// Number of oracle steps for a query at time `t`: remaining time rounded to
/// the nearest step, at least one.
pub fn oracle_steps(t_final: f64, t: f64, h: f64) -> usize {
    (((t_final - t) / h).round().max(1.0)) as usize
}

/// Caches first-move gains per horizon length.
#[derive(Debug, Clone)]
pub struct LqOracle {
    base: BatchLqProblem,
    t_final: f64,
    h: f64,
    gains: BTreeMap<usize, Vec<f64>>,
}

impl LqOracle {
    pub fn new(base: BatchLqProblem, t_final: f64, h: f64) -> Result<Self> {
        base.validate()?;
        Ok(Self {
            base,
            t_final,
            h,
            gains: BTreeMap::new(),
        })
    }

    pub fn problem(&self) -> &BatchLqProblem {
        &self.base
    }

    pub fn gain(&mut self, steps: usize) -> Result<&[f64]> {
        if !self.gains.contains_key(&steps) {
            let g = BatchLqSolver::new(&self.base.with_horizon(steps))?.first_gain();
            self.gains.insert(steps, g);
        }
        Ok(&self.gains[&steps])
    }

    /// `π*(x, t) = u*_{0|t}` for the remaining-steps problem.
    pub fn control(&mut self, x: &[f64], t: f64) -> Result<f64> {
        check_len("oracle state", self.base.state_dim(), x.len())?;
        let steps = oracle_steps(self.t_final, t, self.h);
        let g = self.gain(steps)?;
        Ok(g.iter().zip(x).map(|(k, xi)| k * xi).sum())
    }

    /// Frozen policy view with gains for every horizon precomputed.
    pub fn policy(&mut self) -> Result<OraclePolicy> {
        let max_steps = oracle_steps(self.t_final, 0.0, self.h);
        let mut gains = Vec::with_capacity(max_steps + 1);
        gains.push(Vec::new());
        for n in 1..=max_steps {
            gains.push(self.gain(n)?.to_vec());
        }
        Ok(OraclePolicy {
            gains,
            t_final: self.t_final,
            h: self.h,
        })
    }
}

/// The oracle law as a plain [`Policy`].
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    gains: Vec<Vec<f64>>,
    t_final: f64,
    h: f64,
}

impl Policy for OraclePolicy {
    fn control(&self, x: &[f64], t: f64) -> f64 {
        let n = oracle_steps(self.t_final, t, self.h).min(self.gains.len() - 1);
        self.gains[n].iter().zip(x).map(|(k, xi)| k * xi).sum()
    }
}

/// One test-set row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub state: Vec<f64>,
    pub t: f64,
    pub u_star: f64,
    pub u_policy: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyErrorReport {
    /// Mean of `|π - π*| / (max π* - min π*)`.
    pub mean_abs: f64,
    /// Same without the absolute value.
    pub mean_signed: f64,
    pub oracle_min: f64,
    pub oracle_max: f64,
    /// Test states whose oracle control exceeds the actuator bound.
    pub saturated: usize,
    pub rows: Vec<OracleRow>,
}

/// Relative policy error of `policy` against the LQ oracle over a test set.
pub fn policy_error<C: Policy + ?Sized>(
    policy: &C,
    oracle: &mut LqOracle,
    test_states: &[(Vec<f64>, f64)],
    control_bound: f64,
) -> Result<PolicyErrorReport> {
    if test_states.is_empty() {
        return Err(Error::Config("policy error needs a nonempty test set".into()));
    }
    let mut rows = Vec::with_capacity(test_states.len());
    for (x, t) in test_states {
        rows.push(OracleRow {
            state: x.clone(),
            t: *t,
            u_star: oracle.control(x, *t)?,
            u_policy: policy.control(x, *t),
        });
    }
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.u_star), hi.max(r.u_star))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateNormalization);
    }
    let n = rows.len() as f64;
    let mean_abs = rows.iter().map(|r| (r.u_policy - r.u_star).abs()).sum::<f64>() / n / range;
    let mean_signed = rows.iter().map(|r| r.u_policy - r.u_star).sum::<f64>() / n / range;
    let saturated = rows.iter().filter(|r| r.u_star.abs() > control_bound).count();
    Ok(PolicyErrorReport {
        mean_abs,
        mean_signed,
        oracle_min: lo,
        oracle_max: hi,
        saturated,
        rows,
    })
}
