//! Inverse multiquadric kernels, local cardinal interpolation on patches and
//! assembly of the global sparse differentiation matrices.

use std::collections::BTreeMap;

use faer::linalg::solvers::{ColPivQr, Llt, Solve};
use faer::{Mat, MatMut, Side};
use log::warn;

use crate::error::{Error, Result};
use crate::geometry::Pointset;
use crate::par;
use crate::pum::{weight_derivatives_on, Cover, WeightDerivatives};
use crate::sparse::CsrMatrix;

/// Condition estimates above this are reported.
const CONDITION_WARN: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    epsilon: f64,
}

impl KernelParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("shape parameter must be > 0, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { epsilon: 2.0 }
    }
}

/// Linear operators the discretisation provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operator {
    Identity,
    Dxi,
    Dphi,
    Dxixi,
    Dphiphi,
}

impl Operator {
    pub const ALL: [Operator; 5] =
        [Operator::Identity, Operator::Dxi, Operator::Dphi, Operator::Dxixi, Operator::Dphiphi];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// `(1 + eps^2 r^2)^(-1/2)`.
#[inline]
pub fn imq(r: f64, k: &KernelParams) -> f64 {
    (1.0 + k.epsilon * k.epsilon * r * r).powf(-0.5)
}

/// IMQ kernel centred at `c` and its partials with respect to the
/// evaluation point `q`: `[value, d1, d2, d11, d22, d12]`.
#[inline]
pub fn imq_partials(q: [f64; 2], c: [f64; 2], k: &KernelParams) -> [f64; 6] {
    let e2 = k.epsilon * k.epsilon;
    let dx = q[0] - c[0];
    let dy = q[1] - c[1];
    let u = 1.0 + e2 * (dx * dx + dy * dy);
    let v = 1.0 / u.sqrt();
    let v3 = v / u;
    let v5 = v3 / u;
    [
        v,
        -e2 * dx * v3,
        -e2 * dy * v3,
        -e2 * v3 + 3.0 * e2 * e2 * dx * dx * v5,
        -e2 * v3 + 3.0 * e2 * e2 * dy * dy * v5,
        3.0 * e2 * e2 * dx * dy * v5,
    ]
}

/// Factorisation of a local interpolation matrix.
pub enum LocalFactor {
    Cholesky(Llt<f64>),
    PivotedQr(ColPivQr<f64>),
}

impl std::fmt::Debug for LocalFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LocalFactor::Cholesky(_) => f.write_str("Cholesky"),
            LocalFactor::PivotedQr(_) => f.write_str("PivotedQr"),
        }
    }
}

impl LocalFactor {
    pub fn solve_in_place(&self, rhs: MatMut<'_, f64>) {
        match self {
            LocalFactor::Cholesky(f) => f.solve_in_place(rhs),
            LocalFactor::PivotedQr(f) => f.solve_in_place(rhs),
        }
    }
}

/// Local RBF interpolant on the member nodes of one patch.
#[derive(Debug)]
pub struct LocalInterpolant {
    coords: Vec<[f64; 2]>,
    factor: LocalFactor,
    condition: f64,
    kernel: KernelParams,
}

impl LocalInterpolant {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self.factor, LocalFactor::Cholesky(_))
    }

    /// Cardinal functions and their derivatives at `q`; row `k` holds
    /// `[psi_k, d1, d2, d11, d22]`.
    pub fn cardinal(&self, q: [f64; 2]) -> Mat<f64> {
        let mut rhs = Mat::from_fn(self.len(), 5, |n, op| imq_partials(q, self.coords[n], &self.kernel)[op]);
        self.factor.solve_in_place(rhs.as_mut());
        rhs
    }
}

/// Factorises the symmetric interpolation matrix of one patch.
///
/// Cholesky is tried first; a non-positive pivot falls back to a column
/// pivoted QR factorisation.
pub fn local_interp_factorization(
    patch: usize,
    coords: &[[f64; 2]],
    k: &KernelParams,
) -> Result<LocalInterpolant> {
    let n = coords.len();
    let a = Mat::from_fn(n, n, |i, j| {
        let d = (coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]);
        imq(d, k)
    });
    let (factor, condition) = match a.llt(Side::Lower) {
        Ok(llt) => {
            let l = llt.L();
            let (lo, hi) = (0..n).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
                let d = l[(i, i)].abs();
                (lo.min(d), hi.max(d))
            });
            (LocalFactor::Cholesky(llt), (hi / lo).powi(2))
        }
        Err(_) => {
            let qr = a.col_piv_qr();
            let r = qr.R();
            let d0 = r[(0, 0)].abs();
            let dn = r[(n - 1, n - 1)].abs();
            let condition = if dn > 0.0 { d0 / dn } else { f64::INFINITY };
            if !condition.is_finite() || condition > 1e18 {
                return Err(Error::Factorization { patch, condition });
            }
            (LocalFactor::PivotedQr(qr), condition)
        }
    };
    if condition > CONDITION_WARN {
        warn!("patch {patch}: local interpolation matrix condition estimate {condition:.3e}");
    }
    Ok(LocalInterpolant { coords: coords.to_vec(), factor, condition, kernel: *k })
}

/// Sparse differentiation matrices sharing one sparsity pattern.
#[derive(Debug, Clone)]
pub struct DiffOperators {
    mats: [CsrMatrix; 5],
}

impl DiffOperators {
    pub fn get(&self, op: Operator) -> &CsrMatrix {
        &self.mats[op.index()]
    }

    pub fn id(&self) -> &CsrMatrix {
        &self.mats[0]
    }

    pub fn dxi(&self) -> &CsrMatrix {
        &self.mats[1]
    }

    pub fn dphi(&self) -> &CsrMatrix {
        &self.mats[2]
    }

    pub fn dxixi(&self) -> &CsrMatrix {
        &self.mats[3]
    }

    pub fn dphiphi(&self) -> &CsrMatrix {
        &self.mats[4]
    }

    pub fn n(&self) -> usize {
        self.mats[0].nrows()
    }
}

/// Per-point linear functional: node index and the weights of the five
/// operators at that node.
pub type Stencil = Vec<(usize, [f64; 5])>;

/// Patchwise RBF-PU interpolation over a pointset.
#[derive(Debug)]
pub struct PuInterpolator {
    coords: Vec<[f64; 2]>,
    cover: Cover,
    locals: Vec<LocalInterpolant>,
    kernel: KernelParams,
}

impl PuInterpolator {
    pub fn new(ps: &Pointset, cover: Cover, kernel: KernelParams) -> Result<Self> {
        let coords: Vec<[f64; 2]> = ps.nodes().iter().map(|n| n.coords()).collect();
        let locals = par::map_range(cover.patches().len(), |j| {
            let pc: Vec<[f64; 2]> = cover.patches()[j].members.iter().map(|&m| coords[m]).collect();
            local_interp_factorization(j, &pc, &kernel)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { coords, cover, locals, kernel })
    }

    pub fn cover(&self) -> &Cover {
        &self.cover
    }

    pub fn locals(&self) -> &[LocalInterpolant] {
        &self.locals
    }

    pub fn kernel(&self) -> KernelParams {
        self.kernel
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Weights of every operator at an arbitrary covered point.
    pub fn stencil(&self, q: [f64; 2]) -> Result<Stencil> {
        let covering = self.cover.covering(q);
        if covering.is_empty() {
            return Err(Error::UncoveredPoint(q[0], q[1]));
        }
        let weights = weight_derivatives_on(q, &self.cover, &covering)?;
        let mut acc: BTreeMap<usize, [f64; 5]> = BTreeMap::new();
        for (j, wd) in weights {
            let psi = self.locals[j].cardinal(q);
            for (k, &node) in self.cover.patches()[j].members.iter().enumerate() {
                let row = [psi[(k, 0)], psi[(k, 1)], psi[(k, 2)], psi[(k, 3)], psi[(k, 4)]];
                let e = acc.entry(node).or_insert([0.0; 5]);
                let c = leibniz(&wd, row);
                for (a, b) in e.iter_mut().zip(c) {
                    *a += b;
                }
            }
        }
        Ok(acc.into_iter().collect())
    }

    /// Applies `op` to the interpolant of `nodal` at `q`.
    pub fn evaluate_field(&self, nodal: &[f64], q: [f64; 2], op: Operator) -> Result<f64> {
        assert_eq!(nodal.len(), self.n());
        let s = self.stencil(q)?;
        Ok(apply_stencil(&s, nodal, op))
    }

    /// Assembles the five global differentiation matrices.
    pub fn assemble(&self) -> DiffOperators {
        let n = self.n();
        let cover = &self.cover;
        let node_weights: Vec<Vec<(usize, WeightDerivatives)>> = par::map_range(n, |m| {
            weight_derivatives_on(self.coords[m], cover, cover.patches_of(m))
                .expect("assembly node lies inside its own patches")
        });
        let blocks: Vec<Vec<(usize, usize, [f64; 5])>> = par::map_range(cover.patches().len(), |j| {
            self.patch_contributions(j, &node_weights)
        });

        // pattern: union of the members of every patch containing the row node
        let mut cols: Vec<Vec<usize>> = par::map_range(n, |m| {
            let mut c: Vec<usize> = cover
                .patches_of(m)
                .iter()
                .flat_map(|&j| cover.patches()[j].members.iter().copied())
                .collect();
            c.sort_unstable();
            c.dedup();
            c
        });
        let mut vals: Vec<Vec<[f64; 5]>> = cols.iter().map(|c| vec![[0.0; 5]; c.len()]).collect();
        for block in &blocks {
            for &(m, col, v) in block {
                let k = cols[m].binary_search(&col).expect("column in pattern");
                for (a, b) in vals[m][k].iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        for c in &cols {
            row_ptr.push(row_ptr.last().unwrap() + c.len());
        }
        let col_idx: Vec<usize> = cols.drain(..).flatten().collect();
        let mats = std::array::from_fn(|op| {
            let values: Vec<f64> = vals.iter().flat_map(|r| r.iter().map(move |v| v[op])).collect();
            CsrMatrix::from_parts(n, n, row_ptr.clone(), col_idx.clone(), values)
        });
        DiffOperators { mats }
    }

    fn patch_contributions(
        &self,
        j: usize,
        node_weights: &[Vec<(usize, WeightDerivatives)>],
    ) -> Vec<(usize, usize, [f64; 5])> {
        let members = &self.cover.patches()[j].members;
        let local = &self.locals[j];
        let k = members.len();
        // derivative kernel columns at every member node, solved in one go
        let mut rhs = Mat::from_fn(k, 4 * k, |b, col| {
            let a = col / 4;
            imq_partials(self.coords[members[a]], self.coords[members[b]], &self.kernel)[1 + col % 4]
        });
        local.factor.solve_in_place(rhs.as_mut());
        let mut out = Vec::with_capacity(k * k);
        for (a, &m) in members.iter().enumerate() {
            let wd = node_weights[m]
                .iter()
                .find(|(p, _)| *p == j)
                .map(|(_, w)| *w)
                .expect("patch listed for its member");
            for (b, &col) in members.iter().enumerate() {
                let delta = if a == b { 1.0 } else { 0.0 };
                let row = [delta, rhs[(b, 4 * a)], rhs[(b, 4 * a + 1)], rhs[(b, 4 * a + 2)], rhs[(b, 4 * a + 3)]];
                out.push((m, col, leibniz(&wd, row)));
            }
        }
        out
    }
}

/// Product rule for `w * psi` with `psi = [value, d1, d2, d11, d22]`.
#[inline]
fn leibniz(w: &WeightDerivatives, psi: [f64; 5]) -> [f64; 5] {
    [
        w.w * psi[0],
        w.d1 * psi[0] + w.w * psi[1],
        w.d2 * psi[0] + w.w * psi[2],
        w.d11 * psi[0] + 2.0 * w.d1 * psi[1] + w.w * psi[3],
        w.d22 * psi[0] + 2.0 * w.d2 * psi[2] + w.w * psi[4],
    ]
}

#[inline]
pub fn apply_stencil(s: &Stencil, nodal: &[f64], op: Operator) -> f64 {
    s.iter().map(|(k, w)| w[op.index()] * nodal[*k]).sum()
}

/// Builds the local factorisations and assembles the differentiation
/// matrices in one call.
pub fn assemble_diff_matrices(ps: &Pointset, cover: Cover, k: KernelParams) -> Result<(PuInterpolator, DiffOperators)> {
    let interp = PuInterpolator::new(ps, cover, k)?;
    let ops = interp.assemble();
    Ok((interp, ops))
}

/// `restrict_rows` for a differentiation matrix.
pub fn restrict_rows(m: &CsrMatrix, rows: &[usize]) -> Result<CsrMatrix> {
    m.restrict_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_pointset, ClusterParams, NodeTag, ObstacleShape, TransformParams};
    use crate::pum::build_cover;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn circle(h: f64, rho: f64) -> (Pointset, PuInterpolator, DiffOperators) {
        let t = TransformParams::default();
        let c = ClusterParams::default();
        let ps = generate_pointset(ObstacleShape::Circle, h, &t, &c).unwrap();
        let cover = build_cover(&ps, ObstacleShape::Circle, rho, h, &t, &c).unwrap();
        let (interp, ops) = assemble_diff_matrices(&ps, cover, KernelParams::default()).unwrap();
        (ps, interp, ops)
    }

    #[test]
    fn imq_values() {
        let k = KernelParams::new(2.0).unwrap();
        assert_eq!(imq(0.0, &k), 1.0);
        assert!((imq(1.0, &k) - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((imq(1.0, &k) - 0.44721).abs() < 1e-5);
    }

    #[test]
    fn imq_partials_match_finite_differences() {
        let k = KernelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let p = imq_partials(q, c, &k);
            let f = |a: f64, b: f64| imq_partials([q[0] + a, q[1] + b], c, &k);
            let h = 1e-6;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + b.abs());
            assert!(close(p[1], (f(h, 0.0)[0] - f(-h, 0.0)[0]) / (2.0 * h)));
            assert!(close(p[2], (f(0.0, h)[0] - f(0.0, -h)[0]) / (2.0 * h)));
            assert!(close(p[3], (f(h, 0.0)[1] - f(-h, 0.0)[1]) / (2.0 * h)));
            assert!(close(p[4], (f(0.0, h)[2] - f(0.0, -h)[2]) / (2.0 * h)));
            assert!(close(p[5], (f(0.0, h)[1] - f(0.0, -h)[1]) / (2.0 * h)));
        }
    }

    #[test]
    fn single_node_patch() {
        let k = KernelParams::default();
        let li = local_interp_factorization(0, &[[0.3, 0.4]], &k).unwrap();
        let psi = li.cardinal([0.3, 0.4]);
        assert!((psi[(0, 0)] - 1.0).abs() < 1e-15);
        let psi = li.cardinal([0.5, 0.4]);
        assert!((psi[(0, 0)] - imq(0.2, &k)).abs() < 1e-15);
    }

    #[test]
    fn collinear_nodes_are_positive_definite() {
        let k = KernelParams::new(2.0).unwrap();
        let pts = [[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]];
        let li = local_interp_factorization(0, &pts, &k).unwrap();
        assert!(li.is_cholesky());
        // eigenvalues of the 3x3 Gram matrix, directly
        let a = Mat::from_fn(3, 3, |i, j| imq((pts[i][0] - pts[j][0]).abs(), &k));
        let eig = a.self_adjoint_eigenvalues(Side::Lower).unwrap();
        assert!(eig.iter().all(|&e| e > 0.0), "{eig:?}");
    }

    #[test]
    fn kronecker_delta_on_every_patch() {
        let (ps, interp, _) = circle(0.1, 0.25);
        let mut worst: f64 = 0.0;
        for (j, p) in interp.cover().patches().iter().enumerate() {
            for (a, &m) in p.members.iter().enumerate() {
                let psi = interp.locals()[j].cardinal(ps.nodes()[m].coords());
                for b in 0..p.members.len() {
                    let d = if a == b { 1.0 } else { 0.0 };
                    worst = worst.max((psi[(b, 0)] - d).abs());
                }
            }
        }
        assert!(worst < 1e-8, "worst cardinal deviation {worst}");
    }

    #[test]
    fn identity_operator_is_exact() {
        let (_, _, ops) = circle(0.1, 0.25);
        let id = ops.id();
        let n = id.nrows();
        for i in 0..n {
            let (c, v) = id.row(i);
            for (&j, &a) in c.iter().zip(v) {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn patterns_match_and_are_symmetric() {
        let (_, _, ops) = circle(0.2, 0.5);
        let base = ops.id();
        for op in Operator::ALL {
            let m = ops.get(op);
            assert_eq!(m.row_ptr(), base.row_ptr());
            assert_eq!(m.col_idx(), base.col_idx());
        }
        for i in 0..base.nrows() {
            for &j in base.row(i).0 {
                assert!(base.row(j).0.binary_search(&i).is_ok());
            }
        }
    }

    fn max_interior_error(h: f64, op: Operator, f: impl Fn(f64, f64) -> f64, df: impl Fn(f64, f64) -> f64) -> f64 {
        let (ps, _, ops) = circle(h, 0.25);
        let nodal: Vec<f64> = ps.nodes().iter().map(|n| f(n.xi, n.phi)).collect();
        let d = ops.get(op).mul_vec(&nodal);
        ps.range(NodeTag::Interior)
            .map(|i| {
                let n = ps.nodes()[i];
                (d[i] - df(n.xi, n.phi)).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn dphi_of_sine_converges() {
        let e1 = max_interior_error(0.2, Operator::Dphi, |_, p| p.sin(), |_, p| p.cos());
        let e2 = max_interior_error(0.1, Operator::Dphi, |_, p| p.sin(), |_, p| p.cos());
        assert!(e2 <= e1 / 2.0, "E(0.2) = {e1}, E(0.1) = {e2}");
    }

    #[test]
    fn all_operators_converge_on_smooth_field() {
        let f = |x: f64, p: f64| (x / 2.0).exp() * p.sin();
        let cases: [(Operator, Box<dyn Fn(f64, f64) -> f64>); 4] = [
            (Operator::Dxi, Box::new(|x, p| 0.5 * (x / 2.0).exp() * p.sin())),
            (Operator::Dphi, Box::new(|x, p| (x / 2.0).exp() * p.cos())),
            (Operator::Dxixi, Box::new(|x, p| 0.25 * (x / 2.0).exp() * p.sin())),
            (Operator::Dphiphi, Box::new(|x, p| -(x / 2.0).exp() * p.sin())),
        ];
        for (op, df) in cases {
            let e1 = max_interior_error(0.2, op, f, &df);
            let e2 = max_interior_error(0.1, op, f, &df);
            assert!(e1 / e2 >= 1.5, "{op:?}: E(0.2) = {e1}, E(0.1) = {e2}");
        }
    }

    #[test]
    fn evaluate_field_reproduces_nodes_and_constants() {
        let (ps, interp, _) = circle(0.1, 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nodal: Vec<f64> = (0..ps.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ones = vec![3.5; ps.len()];
        for i in (0..ps.len()).step_by(17) {
            let q = ps.nodes()[i].coords();
            let v = interp.evaluate_field(&nodal, q, Operator::Identity).unwrap();
            assert!((v - nodal[i]).abs() < 1e-8);
            let c = interp.evaluate_field(&ones, q, Operator::Identity).unwrap();
            assert!((c - 3.5).abs() < 1e-8);
        }
    }

    #[test]
    fn evaluate_field_derivative_off_node() {
        let (ps, interp, ops) = circle(0.1, 0.25);
        let nodal: Vec<f64> = ps.nodes().iter().map(|n| n.phi.sin()).collect();
        let band = {
            let d = ops.dphi().mul_vec(&nodal);
            ps.range(NodeTag::Interior)
                .map(|i| (d[i] - ps.nodes()[i].phi.cos()).abs())
                .fold(0.0, f64::max)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let q = [rng.random_range(0.1..1.9), rng.random_range(0.1..PI - 0.1)];
            let v = interp.evaluate_field(&nodal, q, Operator::Dphi).unwrap();
            assert!((v - q[1].cos()).abs() <= 2.0 * band + 1e-6, "{v} vs {}", q[1].cos());
        }
    }

    #[test]
    fn uncovered_point_is_an_error() {
        let (_, interp, _) = circle(0.2, 0.25);
        let nodal = vec![0.0; interp.n()];
        assert!(interp.evaluate_field(&nodal, [10.0, 10.0], Operator::Identity).is_err());
    }
}

