//! Dogleg trust-region root finder for square nonlinear systems and the
//! Reynolds-continuation driver built on it.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, MatRef};
use log::{debug, info};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrustRegionConfig {
    pub delta0: f64,
    pub delta_max: f64,
    pub eta_accept: f64,
    pub shrink: f64,
    pub grow: f64,
    pub tol_residual: f64,
    pub tol_step: f64,
    pub max_iters: usize,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            delta0: 1.0,
            delta_max: 100.0,
            eta_accept: 1e-3,
            shrink: 0.25,
            grow: 2.0,
            tol_residual: 1e-8,
            tol_step: 1e-12,
            max_iters: 100,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: k.into(), message: m.into() });
        if !(self.delta0 > 0.0) {
            return bad("delta0", "must be > 0");
        }
        if !(self.delta_max >= self.delta0) {
            return bad("delta_max", "must be >= delta0");
        }
        if !(self.eta_accept > 0.0 && self.eta_accept < 0.25) {
            return bad("eta_accept", "must lie in (0, 0.25)");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink", "must lie in (0, 1)");
        }
        if !(self.grow > 1.0) {
            return bad("grow", "must be > 1");
        }
        if !(self.tol_residual > 0.0) {
            return bad("tol_residual", "must be > 0");
        }
        if !(self.tol_step >= 0.0) {
            return bad("tol_step", "must be >= 0");
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be >= 1");
        }
        Ok(())
    }
}

/// Factorised square Jacobian, as seen by the dogleg step.
pub trait JacobianSolver {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, x: &[f64]) -> Vec<f64>;
    /// Solves `J p = rhs`.
    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>>;
}

/// Dense Jacobian with a partially pivoted LU factorisation.
pub struct DenseJacobian {
    n: usize,
    data: Vec<f64>,
    lu: PartialPivLu<f64>,
}

impl DenseJacobian {
    /// `data` is column major, `n * n` long.
    pub fn from_column_major(n: usize, data: Vec<f64>) -> Result<Self> {
        assert_eq!(data.len(), n * n);
        let lu = MatRef::from_column_major_slice(&data, n, n).partial_piv_lu();
        let u = lu.U();
        if (0..n).any(|i| !(u[(i, i)].abs() > 0.0) || !u[(i, i)].is_finite()) {
            return Err(Error::SingularJacobian);
        }
        Ok(Self { n, data, lu })
    }

    pub fn from_mat(m: MatRef<'_, f64>) -> Result<Self> {
        assert_eq!(m.nrows(), m.ncols());
        let n = m.nrows();
        let mut data = Vec::with_capacity(n * n);
        for j in 0..n {
            data.extend(m.col(j).iter().copied());
        }
        Self::from_column_major(n, data)
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        MatRef::from_column_major_slice(&self.data, self.n, self.n)
    }

    /// Hager's estimate of the 1-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        let a = self.as_mat();
        let norm_a = (0..n).map(|j| a.col(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let mut x = Mat::from_fn(n, 1, |_, _| 1.0 / n as f64);
        let mut est = 0.0;
        for _ in 0..5 {
            let mut y = x.clone();
            self.lu.solve_in_place(y.as_mut());
            let ny: f64 = y.col(0).iter().map(|v| v.abs()).sum();
            if ny <= est {
                break;
            }
            est = ny;
            let mut z = Mat::from_fn(n, 1, |i, _| if y[(i, 0)] >= 0.0 { 1.0 } else { -1.0 });
            self.lu.solve_transpose_in_place(z.as_mut());
            let (jmax, zmax) = (0..n).fold((0, 0.0), |(jm, zm), i| {
                let v = z[(i, 0)].abs();
                if v > zm { (i, v) } else { (jm, zm) }
            });
            let zx: f64 = (0..n).map(|i| z[(i, 0)] * x[(i, 0)]).sum();
            if zmax <= zx {
                break;
            }
            x = Mat::zeros(n, 1);
            x[(jmax, 0)] = 1.0;
        }
        norm_a * est
    }
}

impl JacobianSolver for DenseJacobian {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let col = &self.data[j * self.n..(j + 1) * self.n];
                for (o, c) in out.iter_mut().zip(col) {
                    *o += c * xj;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|j| self.data[j * self.n..(j + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut b = Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        let p: Vec<f64> = b.col(0).iter().copied().collect();
        if p.iter().all(|v| v.is_finite()) { Ok(p) } else { Err(Error::SingularJacobian) }
    }
}

/// Sparse Jacobian with a sparse LU factorisation.
pub struct SparseJacobian {
    csr: CsrMatrix,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl SparseJacobian {
    pub fn new(csr: CsrMatrix) -> Result<Self> {
        assert_eq!(csr.nrows(), csr.ncols());
        let n = csr.nrows();
        let mut trip = Vec::with_capacity(csr.nnz());
        for i in 0..n {
            let (c, v) = csr.row(i);
            trip.extend(c.iter().zip(v).map(|(&j, &a)| Triplet::new(i, j, a)));
        }
        let csc = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::Assembly(format!("sparse Jacobian: {e:?}")))?;
        let lu = csc.sp_lu().map_err(|_| Error::SingularJacobian)?;
        Ok(Self { csr, lu })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.csr
    }
}

impl JacobianSolver for SparseJacobian {
    fn dim(&self) -> usize {
        self.csr.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.csr.mul_vec(x)
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.csr.mul_transpose_vec(x)
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut b = Mat::from_fn(n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        let p: Vec<f64> = b.col(0).iter().copied().collect();
        if p.iter().all(|v| v.is_finite()) { Ok(p) } else { Err(Error::SingularJacobian) }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Gauss-Newton and Cauchy points for one linearisation; dogleg steps for
/// any radius follow without further solves.
#[derive(Debug, Clone)]
pub struct DoglegPoints {
    p_gn: Vec<f64>,
    p_c: Vec<f64>,
    g: Vec<f64>,
}

impl DoglegPoints {
    pub fn new<J: JacobianSolver>(j: &J, e: &[f64]) -> Result<Self> {
        let n = e.len();
        if e.iter().all(|&v| v == 0.0) {
            return Ok(Self { p_gn: vec![0.0; n], p_c: vec![0.0; n], g: vec![0.0; n] });
        }
        let p_gn: Vec<f64> = j.solve(e)?.into_iter().map(|v| -v).collect();
        let g = j.apply_transpose(e);
        let jg = j.apply(&g);
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let jgjg: f64 = jg.iter().map(|v| v * v).sum();
        if !(jgjg > 0.0) {
            return Err(Error::SingularJacobian);
        }
        let s = gg / jgjg;
        let p_c = g.iter().map(|v| -s * v).collect();
        Ok(Self { p_gn, p_c, g })
    }

    pub fn gauss_newton(&self) -> &[f64] {
        &self.p_gn
    }

    pub fn cauchy(&self) -> &[f64] {
        &self.p_c
    }

    pub fn step(&self, delta: f64) -> Vec<f64> {
        let n_gn = norm2(&self.p_gn);
        if n_gn <= delta {
            return self.p_gn.clone();
        }
        let n_c = norm2(&self.p_c);
        if n_c >= delta {
            let ng = norm2(&self.g);
            return self.g.iter().map(|v| -delta * v / ng).collect();
        }
        let d: Vec<f64> = self.p_gn.iter().zip(&self.p_c).map(|(a, b)| a - b).collect();
        let a: f64 = d.iter().map(|v| v * v).sum();
        let b: f64 = 2.0 * self.p_c.iter().zip(&d).map(|(x, y)| x * y).sum::<f64>();
        let c = n_c * n_c - delta * delta;
        let tau = ((-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)).clamp(0.0, 1.0);
        self.p_c.iter().zip(&d).map(|(p, q)| p + tau * q).collect()
    }
}

/// Dogleg step for the linearisation `E + J p` within radius `delta`.
pub fn dogleg_step<J: JacobianSolver>(j: &J, e: &[f64], delta: f64) -> Result<Vec<f64>> {
    assert!(delta > 0.0);
    Ok(DoglegPoints::new(j, e)?.step(delta))
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub y_final: Vec<f64>,
    pub iterations: usize,
    pub jacobian_evaluations: usize,
    pub merit_history: Vec<f64>,
    pub converged: bool,
    pub final_residual_inf: f64,
}

/// Trust-region iteration on the merit `0.5 |E(y)|^2`.
///
/// Every trial step counts as an iteration; a rejected step reuses the
/// current factorisation with a smaller radius.
pub fn solve<J, R, D>(mut residual: R, mut jacobian: D, y0: Vec<f64>, cfg: &TrustRegionConfig) -> Result<SolveReport>
where
    J: JacobianSolver,
    R: FnMut(&[f64]) -> Result<Vec<f64>>,
    D: FnMut(&[f64]) -> Result<J>,
{
    cfg.validate()?;
    let mut y = y0;
    let mut e = residual(&y)?;
    if e.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "residual has {} entries for {} unknowns",
            e.len(),
            y.len()
        )));
    }
    let merit = |e: &[f64]| 0.5 * e.iter().map(|v| v * v).sum::<f64>();
    let mut mu = merit(&e);
    let mut history = vec![mu];
    let mut delta = cfg.delta0;
    let mut iterations = 0;
    let mut jac_evals = 0;
    let mut current: Option<(J, DoglegPoints)> = None;
    let mut converged = norm_inf(&e) < cfg.tol_residual;
    while !converged && iterations < cfg.max_iters {
        if current.is_none() {
            let j = jacobian(&y)?;
            jac_evals += 1;
            let pts = DoglegPoints::new(&j, &e)?;
            current = Some((j, pts));
        }
        let (j, pts) = current.as_ref().expect("factorisation present");
        let p = pts.step(delta);
        let pn = norm2(&p);
        iterations += 1;
        if pn < cfg.tol_step {
            debug!("step norm {pn:.3e} below tolerance, stopping");
            break;
        }
        let jp = j.apply(&p);
        let predicted = mu - 0.5 * e.iter().zip(&jp).map(|(a, b)| (a + b) * (a + b)).sum::<f64>();
        let y_new: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a + b).collect();
        let e_new = residual(&y_new)?;
        let mu_new = merit(&e_new);
        let rho = if mu_new.is_finite() && predicted > 0.0 { (mu - mu_new) / predicted } else { f64::NEG_INFINITY };
        if rho < 0.25 {
            delta = cfg.shrink * pn;
        } else if rho > 0.75 && pn >= delta * (1.0 - 1e-9) {
            delta = (cfg.grow * delta).min(cfg.delta_max);
        }
        debug!("iteration {iterations}: |E|inf {:.3e}, step {pn:.3e}, rho {rho:.3}, delta {delta:.3e}", norm_inf(&e_new));
        if rho > cfg.eta_accept {
            y = y_new;
            e = e_new;
            mu = mu_new;
            history.push(mu);
            current = None;
            converged = norm_inf(&e) < cfg.tol_residual;
        }
    }
    let final_residual_inf = norm_inf(&e);
    Ok(SolveReport { y_final: y, iterations, jacobian_evaluations: jac_evals, merit_history: history, converged, final_residual_inf })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub re: f64,
    pub report: SolveReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationReport {
    pub stages: Vec<StageReport>,
    /// Index of the first stage that did not converge.
    pub failed_stage: Option<usize>,
}

impl ContinuationReport {
    pub fn converged(&self) -> bool {
        self.failed_stage.is_none()
    }

    pub fn last(&self) -> Option<&StageReport> {
        self.stages.last()
    }

    /// Turns a failed stage into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.failed_stage {
            Some(stage) => Err(Error::StageFailed { stage, re: self.stages[stage].re }),
            None => Ok(self),
        }
    }
}

/// Checks that a Reynolds schedule is non-empty, positive and strictly increasing.
pub fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::InvalidParameter("empty Reynolds schedule".into()));
    }
    if schedule.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidParameter("Reynolds numbers must be positive".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("Reynolds schedule must be strictly increasing".into()));
    }
    Ok(())
}

/// Solves each stage warm-started from the previous one. Stops at the first
/// stage that fails to converge and reports it.
pub fn continuation<F>(schedule: &[f64], y0: Vec<f64>, cfg: &TrustRegionConfig, mut stage: F) -> Result<ContinuationReport>
where
    F: FnMut(f64, Vec<f64>, &TrustRegionConfig) -> Result<SolveReport>,
{
    validate_schedule(schedule)?;
    let mut y = y0;
    let mut stages = Vec::with_capacity(schedule.len());
    for (k, &re) in schedule.iter().enumerate() {
        let report = stage(re, y.clone(), cfg)?;
        info!(
            "Re = {re}: {} iterations, |E|inf = {:.3e}, converged = {}",
            report.iterations, report.final_residual_inf, report.converged
        );
        let ok = report.converged;
        y = report.y_final.clone();
        stages.push(StageReport { re, report });
        if !ok {
            return Ok(ContinuationReport { stages, failed_stage: Some(k) });
        }
    }
    Ok(ContinuationReport { stages, failed_stage: None })
}
