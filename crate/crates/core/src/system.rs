//! Collocation of the transformed Navier-Stokes system: the linear block of
//! boundary conditions and incompressibility, its elimination by a pivoted QR
//! factorisation, the nonlinear momentum residual and its Jacobian.
//!
//! Unknowns are ordered field by field: `v_xi` at all nodes, then `v_phi`,
//! then `p`. Momentum rows are collocated at interior nodes only.

use std::sync::OnceLock;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::householder;
use faer::linalg::solvers::ColPivQr;
use faer::{Conj, Mat, MatRef};
use log::info;

use crate::error::{Error, Result};
use crate::geometry::{generate_pointset, ClusterParams, NodeTag, ObstacleShape, Pointset, TransformParams};
use crate::par;
use crate::pum::build_cover;
use crate::rbf::{assemble_diff_matrices, DiffOperators, KernelParams, Operator, PuInterpolator};
use crate::sparse::{reverse_cuthill_mckee, CsrMatrix};
use crate::trustregion::{self, ContinuationReport, DenseJacobian, SolveReport, SparseJacobian, TrustRegionConfig};

pub const VXI: usize = 0;
pub const VPHI: usize = 1;
pub const P: usize = 2;

/// Nodal values of every field under every operator: `d[field][op]`.
pub type LocalDerivatives = [[f64; 5]; 3];

/// `(field, operator)` pairs that enter the momentum equations.
const PAIRS: [(usize, Operator); 12] = [
    (VXI, Operator::Identity),
    (VXI, Operator::Dxi),
    (VXI, Operator::Dphi),
    (VXI, Operator::Dxixi),
    (VXI, Operator::Dphiphi),
    (VPHI, Operator::Identity),
    (VPHI, Operator::Dxi),
    (VPHI, Operator::Dphi),
    (VPHI, Operator::Dxixi),
    (VPHI, Operator::Dphiphi),
    (P, Operator::Dxi),
    (P, Operator::Dphi),
];

/// Pointwise residuals `[W1, W2, W3]` of the transformed equations.
pub fn transformed_residual(xi: f64, ell: f64, re: f64, d: &LocalDerivatives) -> [f64; 3] {
    let a = ell - xi;
    let h = 0.5 * re;
    let [u, v, p] = d;
    let w1 = h * (a * u[0] * u[1] + v[0] * u[2] - v[0] * v[0] + a * p[1]) - a * a * a / ell * u[3] - a / ell * u[4]
        + a * a / ell * u[1]
        + 2.0 * a / ell * v[2]
        + a / ell * u[0];
    let w2 = h * (a * u[0] * v[1] + v[0] * v[2] + u[0] * v[0] + p[2]) - a * a * a / ell * v[3] - a / ell * v[4]
        + a * a / ell * v[1]
        - 2.0 * a / ell * u[2]
        + a / ell * v[0];
    let w3 = a * u[1] + v[2] + u[0];
    [w1, w2, w3]
}

/// Partial derivatives of `W1` and `W2` with respect to each nodal
/// derivative value, laid out like [`LocalDerivatives`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrechetCoefficients {
    pub w1: LocalDerivatives,
    pub w2: LocalDerivatives,
}

pub fn frechet_coefficients(xi: f64, ell: f64, re: f64, d: &LocalDerivatives) -> FrechetCoefficients {
    let a = ell - xi;
    let h = 0.5 * re;
    let [u, v, _] = d;
    let (id, dx, dp, dxx, dpp) = (0, 1, 2, 3, 4);
    let mut w1 = [[0.0; 5]; 3];
    let mut w2 = [[0.0; 5]; 3];
    w1[VXI][dxx] = -a * a * a / ell;
    w1[VXI][dpp] = -a / ell;
    w1[VXI][id] = h * a * u[1] + a / ell;
    w1[VPHI][id] = h * (u[2] - 2.0 * v[0]);
    w1[VXI][dx] = h * a * u[0] + a * a / ell;
    w1[VXI][dp] = h * v[0];
    w1[VPHI][dp] = 2.0 * a / ell;
    w1[P][dx] = h * a;

    w2[VPHI][dxx] = -a * a * a / ell;
    w2[VPHI][dpp] = -a / ell;
    w2[VXI][id] = h * (a * v[1] + v[0]);
    w2[VPHI][id] = h * (u[0] + v[2]) + a / ell;
    w2[VPHI][dx] = h * a * u[0] + a * a / ell;
    w2[VXI][dp] = -2.0 * a / ell;
    w2[VPHI][dp] = h * v[0];
    w2[P][dp] = h;
    FrechetCoefficients { w1, w2 }
}

/// Far-field Dirichlet values `(v_xi, v_phi, p)` of the uniform stream.
pub fn far_field_values(phi: f64) -> [f64; 3] {
    [phi.cos(), -phi.sin(), 0.0]
}

/// Boundary conditions stacked over incompressibility rows.
#[derive(Debug, Clone)]
pub struct LinearBlock {
    pub lin: CsrMatrix,
    pub g: Vec<f64>,
    /// For Dirichlet rows, the single unknown they fix.
    pub dirichlet: Vec<Option<usize>>,
    pub n_bc: usize,
}

/// Builds the linear rows: far-field values of all fields, no-slip on the
/// obstacle, symmetry on the axis (`d_phi v_xi = 0`, `v_phi = 0`,
/// `d_phi p = 0`), then the divergence at interior and obstacle nodes.
pub fn assemble_linear_block(ps: &Pointset, ops: &DiffOperators, t: &TransformParams) -> LinearBlock {
    let n = ps.len();
    let ell = t.ell();
    // (row, rhs, fixed unknown)
    let mut rows: Vec<(Vec<(usize, f64)>, f64, Option<usize>)> = Vec::new();
    let unit = |col: usize, value: f64| (vec![(col, 1.0)], value, Some(col));
    let shifted = |op: &CsrMatrix, k: usize, f: usize| -> Vec<(usize, f64)> {
        let (c, v) = op.row(k);
        c.iter().zip(v).map(|(&j, &a)| (f * n + j, a)).collect()
    };
    for f in [VXI, VPHI, P] {
        for k in ps.range(NodeTag::Far) {
            rows.push(unit(f * n + k, far_field_values(ps.nodes()[k].phi)[f]));
        }
    }
    for f in [VXI, VPHI] {
        for k in ps.range(NodeTag::Cylinder) {
            rows.push(unit(f * n + k, 0.0));
        }
    }
    for k in ps.range(NodeTag::Axis) {
        rows.push((shifted(ops.dphi(), k, VXI), 0.0, None));
    }
    for k in ps.range(NodeTag::Axis) {
        rows.push(unit(VPHI * n + k, 0.0));
    }
    for k in ps.range(NodeTag::Axis) {
        rows.push((shifted(ops.dphi(), k, P), 0.0, None));
    }
    let n_bc = rows.len();
    for k in ps.range(NodeTag::Interior).chain(ps.range(NodeTag::Cylinder)) {
        let a = ell - ps.nodes()[k].xi;
        let (c, dx) = ops.dxi().row(k);
        let (_, id) = ops.id().row(k);
        let mut row: Vec<(usize, f64)> = c.iter().zip(id.iter().zip(dx)).map(|(&j, (&i, &d))| (j, i + a * d)).collect();
        row.extend(shifted(ops.dphi(), k, VPHI));
        rows.push((row, 0.0, None));
    }
    let mut g = Vec::with_capacity(rows.len());
    let mut dirichlet = Vec::with_capacity(rows.len());
    let mut lin_rows = Vec::with_capacity(rows.len());
    for (r, v, d) in rows {
        lin_rows.push(r);
        g.push(v);
        dirichlet.push(d);
    }
    LinearBlock { lin: CsrMatrix::from_rows(3 * n, lin_rows), g, dirichlet, n_bc }
}

/// Orthogonal elimination of the linear block: every `X = x_p + O2 y`
/// satisfies `LIN X = g`.
pub struct Reduction {
    qr: ColPivQr<f64>,
    /// Column 0 holds `x_p`, the rest is `O2`.
    basis: Mat<f64>,
    rank_ratio: f64,
}

impl std::fmt::Debug for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reduction")
            .field("unknowns", &self.basis.nrows())
            .field("reduced", &self.dim())
            .field("rank_ratio", &self.rank_ratio)
            .finish()
    }
}

/// Relative threshold on the diagonal of `R` below which rows count as dependent.
pub const RANK_TOL: f64 = 1e-12;

pub fn reduce_linear(lb: &LinearBlock) -> Result<Reduction> {
    let m = lb.lin.nrows();
    let n = lb.lin.ncols();
    if m >= n {
        return Err(Error::Assembly(format!("linear block has {m} rows for {n} unknowns")));
    }
    let mut at = Mat::<f64>::zeros(n, m);
    for i in 0..m {
        let (c, v) = lb.lin.row(i);
        for (&j, &a) in c.iter().zip(v) {
            at[(j, i)] += a;
        }
    }
    let qr = ColPivQr::new(at.as_ref());
    drop(at);
    let r = qr.R();
    let r00 = r[(0, 0)].abs();
    let deficient = (0..m).filter(|&k| !(r[(k, k)].abs() > RANK_TOL * r00)).count();
    if deficient > 0 {
        return Err(Error::RankDeficient { deficient, rows: m });
    }
    let rank_ratio = (0..m).map(|k| r[(k, k)].abs()).fold(f64::INFINITY, f64::min) / r00;

    // R^T z = P^T g, forward substitution
    let perm = qr.P().arrays().0;
    let mut z = vec![0.0; m];
    for k in 0..m {
        let mut s = lb.g[perm[k]];
        for i in 0..k {
            s -= r[(i, k)] * z[i];
        }
        z[k] = s / r[(k, k)];
    }
    let n2 = n - m;
    let mut basis = Mat::<f64>::zeros(n, 1 + n2);
    for (k, &zk) in z.iter().enumerate() {
        basis[(k, 0)] = zk;
    }
    for j in 0..n2 {
        basis[(m + j, 1 + j)] = 1.0;
    }
    let par = par::faer_par();
    let bs = qr.Q_coeff().nrows();
    householder::apply_block_householder_sequence_on_the_left_in_place_with_conj(
        qr.Q_basis(),
        qr.Q_coeff(),
        Conj::No,
        basis.as_mut(),
        par,
        MemStack::new(&mut MemBuffer::new(
            householder::apply_block_householder_sequence_on_the_left_in_place_scratch::<f64>(n, bs, 1 + n2),
        )),
    );
    Ok(Reduction { qr, basis, rank_ratio })
}

impl Reduction {
    /// Dimension of the reduced unknown `y`.
    pub fn dim(&self) -> usize {
        self.basis.ncols() - 1
    }

    pub fn n_unknowns(&self) -> usize {
        self.basis.nrows()
    }

    pub fn o2(&self) -> MatRef<'_, f64> {
        self.basis.as_ref().subcols(1, self.dim())
    }

    pub fn x_particular(&self) -> Vec<f64> {
        self.basis.col(0).iter().copied().collect()
    }

    /// Smallest over largest diagonal entry of `R`.
    pub fn rank_ratio(&self) -> f64 {
        self.rank_ratio
    }

    pub fn r(&self) -> MatRef<'_, f64> {
        self.qr.R()
    }

    /// Forward column permutation of `LIN^T`.
    pub fn permutation(&self) -> &[usize] {
        self.qr.P().arrays().0
    }

    /// Orthonormal basis of the row space of `LIN`. Formed on demand.
    pub fn o1(&self) -> Mat<f64> {
        self.qr.compute_thin_Q()
    }

    /// `x_p + O2 y`.
    pub fn expand(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.dim());
        let mut x = self.x_particular();
        for (j, &yj) in y.iter().enumerate() {
            if yj != 0.0 {
                for (xi, b) in x.iter_mut().zip(self.basis.col(1 + j).iter()) {
                    *xi += b * yj;
                }
            }
        }
        x
    }

    /// `O2^T (x - x_p)`, the reduced coordinates of a constrained vector.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let xp = self.basis.col(0);
        (0..self.dim())
            .map(|j| self.basis.col(1 + j).iter().zip(x.iter().zip(xp.iter())).map(|(b, (a, c))| b * (a - c)).sum())
            .collect()
    }
}

/// Which Jacobian the trust-region solve uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Dense Jacobian of the reduced system.
    #[default]
    ReducedDense,
    /// Sparse Jacobian over the unknowns left after substituting Dirichlet values.
    SparseAlternative,
}

/// Discretisation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretisation {
    pub shape: ObstacleShape,
    pub h: f64,
    pub transform: TransformParams,
    pub cluster: ClusterParams,
    pub kernel: KernelParams,
    pub patch_radius: f64,
}

impl Discretisation {
    pub fn new(shape: ObstacleShape, h: f64) -> Self {
        Self {
            shape,
            h,
            transform: TransformParams::default(),
            cluster: ClusterParams::default(),
            kernel: KernelParams::default(),
            patch_radius: 0.25,
        }
    }

    pub fn with_patch_radius(mut self, rho: f64) -> Self {
        self.patch_radius = rho;
        self
    }
}

/// Geometry, operators and the linear reduction. None of it depends on the
/// Reynolds number, so one system serves every continuation stage.
pub struct FlowSystem {
    disc: Discretisation,
    ps: Pointset,
    interp: PuInterpolator,
    ops: DiffOperators,
    lb: LinearBlock,
    red: OnceLock<Reduction>,
    projections: OnceLock<Vec<Vec<f64>>>,
}

impl std::fmt::Debug for FlowSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowSystem").field("disc", &self.disc).field("nodes", &self.ps.len()).finish()
    }
}

impl FlowSystem {
    /// Generates nodes and cover, and assembles operators and linear block.
    /// The QR reduction is formed on first use.
    pub fn build(disc: Discretisation) -> Result<Self> {
        faer::set_global_parallelism(par::faer_par());
        let ps = generate_pointset(disc.shape, disc.h, &disc.transform, &disc.cluster)?;
        let cover = build_cover(&ps, disc.shape, disc.patch_radius, disc.h, &disc.transform, &disc.cluster)?;
        info!(
            "{} nodes ({} interior), {} patches, max overlap {}",
            ps.len(),
            ps.n_interior(),
            cover.patches().len(),
            cover.max_overlap()
        );
        let (interp, ops) = assemble_diff_matrices(&ps, cover, disc.kernel)?;
        let lb = assemble_linear_block(&ps, &ops, &disc.transform);
        Ok(Self { disc, ps, interp, ops, lb, red: OnceLock::new(), projections: OnceLock::new() })
    }

    pub fn discretisation(&self) -> &Discretisation {
        &self.disc
    }

    pub fn shape(&self) -> ObstacleShape {
        self.disc.shape
    }

    pub fn transform(&self) -> &TransformParams {
        &self.disc.transform
    }

    pub fn pointset(&self) -> &Pointset {
        &self.ps
    }

    pub fn interpolator(&self) -> &PuInterpolator {
        &self.interp
    }

    pub fn ops(&self) -> &DiffOperators {
        &self.ops
    }

    pub fn linear_block(&self) -> &LinearBlock {
        &self.lb
    }

    pub fn n(&self) -> usize {
        self.ps.len()
    }

    pub fn n_interior(&self) -> usize {
        self.ps.n_interior()
    }

    pub fn reduction(&self) -> Result<&Reduction> {
        if let Some(r) = self.red.get() {
            return Ok(r);
        }
        let r = reduce_linear(&self.lb)?;
        info!("linear block reduced: {} unknowns -> {}", r.n_unknowns(), r.dim());
        Ok(self.red.get_or_init(|| r))
    }

    pub fn problem(&self, re: f64) -> Result<FlowProblem<'_>> {
        FlowProblem::new(self, re)
    }

    /// All operator values of all fields at every node.
    pub fn nodal_derivatives(&self, x: &[f64]) -> [[Vec<f64>; 5]; 3] {
        let n = self.n();
        assert_eq!(x.len(), 3 * n);
        std::array::from_fn(|f| {
            let xf = &x[f * n..(f + 1) * n];
            std::array::from_fn(|op| self.ops.get(Operator::ALL[op]).mul_vec(xf))
        })
    }

    fn local(all: &[[Vec<f64>; 5]; 3], i: usize) -> LocalDerivatives {
        std::array::from_fn(|f| std::array::from_fn(|op| all[f][op][i]))
    }

    /// `[W1, W2, W3]` at every node.
    pub fn pointwise_residuals(&self, x: &[f64], re: f64) -> Vec<[f64; 3]> {
        let d = self.nodal_derivatives(x);
        let ell = self.disc.transform.ell();
        (0..self.n()).map(|i| transformed_residual(self.ps.nodes()[i].xi, ell, re, &Self::local(&d, i))).collect()
    }

    /// Momentum residual at interior nodes: `W1` rows then `W2` rows.
    pub fn momentum_residual(&self, x: &[f64], re: f64) -> Vec<f64> {
        let ni = self.n_interior();
        let d = self.nodal_derivatives(x);
        let ell = self.disc.transform.ell();
        let mut e = vec![0.0; 2 * ni];
        for i in 0..ni {
            let w = transformed_residual(self.ps.nodes()[i].xi, ell, re, &Self::local(&d, i));
            e[i] = w[0];
            e[ni + i] = w[1];
        }
        e
    }

    fn coefficients(&self, x: &[f64], re: f64) -> Vec<FrechetCoefficients> {
        let d = self.nodal_derivatives(x);
        let ell = self.disc.transform.ell();
        (0..self.n_interior())
            .map(|i| frechet_coefficients(self.ps.nodes()[i].xi, ell, re, &Self::local(&d, i)))
            .collect()
    }

    /// Sparse `2 N_I x 3N` Jacobian of the momentum residual with respect to `X`.
    pub fn full_jacobian(&self, x: &[f64], re: f64) -> CsrMatrix {
        let n = self.n();
        let coef = self.coefficients(x, re);
        let rows = par::map_range(2 * coef.len(), |r| {
            let ni = coef.len();
            let (i, c) = if r < ni { (r, &coef[r].w1) } else { (r - ni, &coef[r - ni].w2) };
            self.operator_row(i, c, n)
        });
        CsrMatrix::from_rows(3 * n, rows)
    }

    fn operator_row(&self, i: usize, c: &LocalDerivatives, n: usize) -> Vec<(usize, f64)> {
        let (cols, _) = self.ops.id().row(i);
        let mut row = Vec::with_capacity(3 * cols.len());
        for (f, cf) in c.iter().enumerate() {
            if cf.iter().all(|&v| v == 0.0) {
                continue;
            }
            let start = self.ops.id().row_ptr()[i];
            for (k, &j) in cols.iter().enumerate() {
                let v: f64 = Operator::ALL
                    .iter()
                    .zip(cf)
                    .filter(|(_, &a)| a != 0.0)
                    .map(|(op, a)| a * self.ops.get(*op).values()[start + k])
                    .sum();
                row.push((f * n + j, v));
            }
        }
        row
    }

    /// `[L]_{interior} O2_f` for every `(field, operator)` pair, column major.
    fn projections(&self) -> Result<&Vec<Vec<f64>>> {
        if let Some(p) = self.projections.get() {
            return Ok(p);
        }
        let red = self.reduction()?;
        let o2 = red.o2();
        let n = self.n();
        let ni = self.n_interior();
        let n2 = red.dim();
        let mut out: Vec<Vec<f64>> = PAIRS.iter().map(|_| vec![0.0; ni * n2]).collect();
        {
            let mut columns: Vec<Vec<&mut [f64]>> = (0..n2).map(|_| Vec::with_capacity(PAIRS.len())).collect();
            for arr in out.iter_mut() {
                for (j, c) in arr.chunks_mut(ni).enumerate() {
                    columns[j].push(c);
                }
            }
            let id = self.ops.id();
            let row_ptr = id.row_ptr();
            let col_idx = id.col_idx();
            let vals: Vec<&[f64]> = Operator::ALL.iter().map(|&op| self.ops.get(op).values()).collect();
            par::for_each_owned(columns, |j, mut cols| {
                let o = o2.col(j);
                for i in 0..ni {
                    let mut acc = [[0.0; 5]; 3];
                    for k in row_ptr[i]..row_ptr[i + 1] {
                        let c = col_idx[k];
                        let xs = [o[c], o[n + c], o[2 * n + c]];
                        for op in 0..5 {
                            let a = vals[op][k];
                            acc[0][op] += a * xs[0];
                            acc[1][op] += a * xs[1];
                            acc[2][op] += a * xs[2];
                        }
                    }
                    for (p, &(f, op)) in PAIRS.iter().enumerate() {
                        cols[p][i] = acc[f][op.index()];
                    }
                }
            });
        }
        info!("operator projections formed ({} x {} each)", ni, n2);
        Ok(self.projections.get_or_init(|| out))
    }

    /// Unknowns kept by the sparse formulation, and the values of the
    /// substituted Dirichlet unknowns.
    pub fn retained_unknowns(&self) -> (Vec<usize>, Vec<f64>) {
        let n3 = 3 * self.n();
        let mut base = vec![0.0; n3];
        let mut fixed = vec![false; n3];
        for (r, d) in self.lb.dirichlet.iter().enumerate() {
            if let Some(c) = *d {
                fixed[c] = true;
                base[c] = self.lb.g[r];
            }
        }
        ((0..n3).filter(|&c| !fixed[c]).collect(), base)
    }
}

/// A flow system at one Reynolds number.
#[derive(Debug, Clone, Copy)]
pub struct FlowProblem<'a> {
    sys: &'a FlowSystem,
    re: f64,
}

impl<'a> FlowProblem<'a> {
    pub fn new(sys: &'a FlowSystem, re: f64) -> Result<Self> {
        if !(re > 0.0) || !re.is_finite() {
            return Err(Error::InvalidParameter(format!("Reynolds number must be > 0, got {re}")));
        }
        Ok(Self { sys, re })
    }

    #[cfg(test)]
    pub(crate) fn new_unchecked(sys: &'a FlowSystem, re: f64) -> Self {
        Self { sys, re }
    }

    pub fn re(&self) -> f64 {
        self.re
    }

    pub fn system(&self) -> &'a FlowSystem {
        self.sys
    }

    pub fn x_of(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.sys.reduction()?.expand(y))
    }

    /// Momentum residual of the reduced unknown.
    pub fn residual(&self, y: &[f64]) -> Result<Vec<f64>> {
        let x = self.x_of(y)?;
        Ok(self.sys.momentum_residual(&x, self.re))
    }

    /// Dense reduced Jacobian `J = J_hat(X) O2`, column major.
    pub fn jacobian_data(&self, y: &[f64]) -> Result<Vec<f64>> {
        let x = self.x_of(y)?;
        let proj = self.sys.projections()?;
        let coef = self.sys.coefficients(&x, self.re);
        let ni = self.sys.n_interior();
        let n2 = self.sys.reduction()?.dim();
        // coefficient columns per pair, skipping pairs that vanish on a row block
        let gather = |w: fn(&FrechetCoefficients) -> &LocalDerivatives| -> Vec<(usize, Vec<f64>)> {
            PAIRS
                .iter()
                .enumerate()
                .filter_map(|(p, &(f, op))| {
                    let c: Vec<f64> = coef.iter().map(|fc| w(fc)[f][op.index()]).collect();
                    c.iter().any(|&v| v != 0.0).then_some((p, c))
                })
                .collect()
        };
        let c1 = gather(|fc| &fc.w1);
        let c2 = gather(|fc| &fc.w2);
        let mut data = vec![0.0; 2 * ni * n2];
        par::for_each_chunk_mut(&mut data, 2 * ni, |j, col| {
            let (top, bottom) = col.split_at_mut(ni);
            for (p, c) in &c1 {
                let g = &proj[*p][j * ni..(j + 1) * ni];
                for ((t, a), b) in top.iter_mut().zip(c).zip(g) {
                    *t += a * b;
                }
            }
            for (p, c) in &c2 {
                let g = &proj[*p][j * ni..(j + 1) * ni];
                for ((t, a), b) in bottom.iter_mut().zip(c).zip(g) {
                    *t += a * b;
                }
            }
        });
        Ok(data)
    }

    pub fn jacobian(&self, y: &[f64]) -> Result<DenseJacobian> {
        let n2 = self.sys.reduction()?.dim();
        DenseJacobian::from_column_major(n2, self.jacobian_data(y)?)
    }

    /// Dense reduced Jacobian as a matrix.
    pub fn jacobian_matrix(&self, y: &[f64]) -> Result<Mat<f64>> {
        let n2 = self.sys.reduction()?.dim();
        let data = self.jacobian_data(y)?;
        Ok(MatRef::from_column_major_slice(&data, n2, n2).to_owned())
    }

    /// Trust-region solve of the reduced system.
    pub fn solve_reduced(&self, y0: Vec<f64>, cfg: &TrustRegionConfig) -> Result<SolveReport> {
        trustregion::solve(|y| self.residual(y), |y| self.jacobian(y), y0, cfg)
    }

    /// Full vector from the retained unknowns of the sparse formulation.
    pub fn x_from_retained(&self, xr: &[f64]) -> Vec<f64> {
        let (keep, mut x) = self.sys.retained_unknowns();
        for (&c, &v) in keep.iter().zip(xr) {
            x[c] = v;
        }
        x
    }

    /// Residual of the sparse formulation: retained linear rows, then momentum.
    pub fn sparse_residual(&self, xr: &[f64]) -> Vec<f64> {
        let x = self.x_from_retained(xr);
        let lb = &self.sys.lb;
        let lin_x = lb.lin.mul_vec(&x);
        let mut f: Vec<f64> = (0..lb.lin.nrows()).filter(|&r| lb.dirichlet[r].is_none()).map(|r| lin_x[r] - lb.g[r]).collect();
        f.extend(self.sys.momentum_residual(&x, self.re));
        f
    }

    /// Sparse square Jacobian over the retained unknowns.
    pub fn sparse_jacobian_alternative(&self, xr: &[f64]) -> CsrMatrix {
        let x = self.x_from_retained(xr);
        let (keep, _) = self.sys.retained_unknowns();
        let lb = &self.sys.lb;
        let linear_rows: Vec<usize> = (0..lb.lin.nrows()).filter(|&r| lb.dirichlet[r].is_none()).collect();
        let lin = lb.lin.restrict_rows(&linear_rows).expect("row indices in range");
        let stacked = CsrMatrix::vstack(&[&lin, &self.sys.full_jacobian(&x, self.re)]);
        stacked.restrict_cols(&keep)
    }

    pub fn solve_sparse(&self, xr0: Vec<f64>, cfg: &TrustRegionConfig) -> Result<SolveReport> {
        trustregion::solve(
            |xr| Ok(self.sparse_residual(xr)),
            |xr| SparseJacobian::new(self.sparse_jacobian_alternative(xr)),
            xr0,
            cfg,
        )
    }
}

/// Fraction of nonzero entries.
pub fn sparsity_ratio(m: &CsrMatrix) -> f64 {
    m.nnz() as f64 / (m.nrows() as f64 * m.ncols() as f64)
}

/// Bandwidth before and after reverse Cuthill-McKee reordering.
pub fn bandwidth_report(m: &CsrMatrix) -> (usize, usize) {
    let perm = reverse_cuthill_mckee(m);
    (m.bandwidth(), m.permute_symmetric(&perm).bandwidth())
}

/// Continuation result with the full nodal vector of each stage.
#[derive(Debug, Clone)]
pub struct ContinuationRun {
    pub report: ContinuationReport,
    pub solutions: Vec<Vec<f64>>,
}

impl FlowSystem {
    /// Reynolds continuation from the zero initial guess of the chosen
    /// formulation.
    pub fn continuation(&self, schedule: &[f64], mode: JacobianMode, cfg: &TrustRegionConfig) -> Result<ContinuationRun> {
        let mut solutions = Vec::new();
        let report = match mode {
            JacobianMode::ReducedDense => {
                let y0 = vec![0.0; self.reduction()?.dim()];
                trustregion::continuation(schedule, y0, cfg, |re, y, cfg| {
                    let prob = self.problem(re)?;
                    let r = prob.solve_reduced(y, cfg)?;
                    solutions.push(prob.x_of(&r.y_final)?);
                    Ok(r)
                })?
            }
            JacobianMode::SparseAlternative => {
                let x0 = vec![0.0; self.retained_unknowns().0.len()];
                trustregion::continuation(schedule, x0, cfg, |re, xr, cfg| {
                    let prob = self.problem(re)?;
                    let r = prob.solve_sparse(xr, cfg)?;
                    solutions.push(prob.x_from_retained(&r.y_final));
                    Ok(r)
                })?
            }
        };
        Ok(ContinuationRun { report, solutions })
    }
}
