//! Patch covers and Shepard partition-of-unity weights.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::geometry::{
    boundary_curve, clustered_phi_grid, column_xi, intervals, ClusterParams, ObstacleShape,
    Pointset, TransformParams,
};

/// Normalised distances at or beyond this are outside a patch.
const MEMBER_LIMIT: f64 = 1.0 - 1e-12;

/// C2 Wendland function `(1-r)^4_+ (4r+1)`.
#[inline]
pub fn wendland_c2(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        let t = 1.0 - r;
        let t2 = t * t;
        t2 * t2 * (4.0 * r + 1.0)
    }
}

/// Axis-aligned elliptic patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: [f64; 2],
    pub semiaxes: [f64; 2],
    pub members: Vec<usize>,
}

impl Patch {
    fn new(center: [f64; 2], semiaxes: [f64; 2]) -> Self {
        Self { center, semiaxes, members: Vec::new() }
    }

    /// Normalised elliptic distance of `q` from the centre.
    #[inline]
    pub fn distance(&self, q: [f64; 2]) -> f64 {
        let a = (q[0] - self.center[0]) / self.semiaxes[0];
        let b = (q[1] - self.center[1]) / self.semiaxes[1];
        (a * a + b * b).sqrt()
    }

    #[inline]
    pub fn contains(&self, q: [f64; 2]) -> bool {
        self.distance(q) < MEMBER_LIMIT
    }

    /// Wendland bump of the patch and its derivatives at `q`:
    /// `[value, d1, d2, d11, d22, d12]`.
    pub fn bump(&self, q: [f64; 2]) -> [f64; 6] {
        let [r1, r2] = self.semiaxes;
        let d1 = q[0] - self.center[0];
        let d2 = q[1] - self.center[1];
        let s = ((d1 / r1).powi(2) + (d2 / r2).powi(2)).sqrt();
        if s >= 1.0 {
            return [0.0; 6];
        }
        let t = 1.0 - s;
        let value = t.powi(4) * (4.0 * s + 1.0);
        // W'(s)/s and (d/ds)(W'(s)/s)/s
        let g = -20.0 * t.powi(3);
        let a1 = d1 / (r1 * r1);
        let a2 = d2 / (r2 * r2);
        let (h11, h22, h12) = if s > 0.0 {
            let h = 60.0 * t * t / s;
            (h * a1 * a1, h * a2 * a2, h * a1 * a2)
        } else {
            (0.0, 0.0, 0.0)
        };
        [value, g * a1, g * a2, h11 + g / (r1 * r1), h22 + g / (r2 * r2), h12]
    }
}

/// Overlapping patches covering a pointset.
#[derive(Debug, Clone)]
pub struct Cover {
    patches: Vec<Patch>,
    node_to_patches: Vec<Vec<usize>>,
    max_overlap: usize,
}

impl Cover {
    /// Assigns member nodes, drops empty patches and checks that every node
    /// is covered.
    pub fn from_patches(ps: &Pointset, candidates: Vec<Patch>) -> Result<Self> {
        let mut patches: Vec<Patch> = candidates
            .into_iter()
            .map(|mut p| {
                p.members = ps
                    .nodes()
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| p.contains(n.coords()))
                    .map(|(i, _)| i)
                    .collect();
                p
            })
            .filter(|p| !p.members.is_empty())
            .collect();
        patches.shrink_to_fit();
        let mut node_to_patches = vec![Vec::new(); ps.len()];
        for (j, p) in patches.iter().enumerate() {
            for &m in &p.members {
                node_to_patches[m].push(j);
            }
        }
        if let Some(node) = node_to_patches.iter().position(|v| v.is_empty()) {
            let n = ps.nodes()[node];
            return Err(Error::Uncovered { node, xi: n.xi, phi: n.phi });
        }
        let max_overlap = node_to_patches.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self { patches, node_to_patches, max_overlap })
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    /// Patches whose interior contains node `node`, sorted.
    pub fn patches_of(&self, node: usize) -> &[usize] {
        &self.node_to_patches[node]
    }

    /// Largest number of patches containing a single node.
    pub fn max_overlap(&self) -> usize {
        self.max_overlap
    }

    /// Patches containing an arbitrary point.
    pub fn covering(&self, q: [f64; 2]) -> Vec<usize> {
        self.patches
            .iter()
            .enumerate()
            .filter(|(_, p)| p.contains(q))
            .map(|(j, _)| j)
            .collect()
    }
}

/// Angular semiaxis of a square patch as a fraction of its cell width.
/// Rows are one radius apart, so covering the cell edges halfway between
/// rows needs more than `1 / sqrt(3)`.
const CELL_REACH: f64 = 0.7;

/// Builds the patch cover for a pointset.
///
/// Circles use a square grid of discs of radius `patch_radius` whose centres
/// are one radius apart, shifted half a radius in `phi`. Other shapes follow
/// the body: each column of patch centres starts on the surface curve, and
/// for the square the columns sit midway between the points of a coarse
/// copy of the clustered node grid. Square patches holding
/// fewer than a third of the fullest patch's nodes are then grown until
/// they don't.
pub fn build_cover(
    ps: &Pointset,
    shape: ObstacleShape,
    patch_radius: f64,
    spacing: f64,
    t: &TransformParams,
    c: &ClusterParams,
) -> Result<Cover> {
    if !(patch_radius > spacing / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "patch radius {patch_radius} must exceed half the node spacing {spacing}"
        )));
    }
    let ell = t.ell();
    let rho = patch_radius;
    let mut candidates = Vec::new();
    if shape.is_circle() {
        let n1 = (ell / rho - 1e-9).ceil() as usize;
        let n2 = (PI / rho - 1e-9).ceil() as usize;
        // Rows sit half a radius off the axis so no centre lies on a
        // symmetry line.
        for k2 in 0..=n2 {
            for k1 in 0..=n1 {
                candidates.push(Patch::new([k1 as f64 * rho, (k2 as f64 - 0.5) * rho], [rho, rho]));
            }
        }
        return Cover::from_patches(ps, candidates);
    }
    let columns: Vec<(f64, f64)> = match shape {
        ObstacleShape::Square => {
            // one column per cell of the clustered grid, so the ellipses
            // shrink with the node spacing and hold similar node counts
            let phis = clustered_phi_grid(intervals(FRAC_PI_2, rho) + 1, c)?;
            phis.windows(2).map(|w| (0.5 * (w[0] + w[1]), CELL_REACH * (w[1] - w[0]))).collect()
        }
        _ => {
            let n = intervals(PI, rho);
            (0..=n).map(|j| (PI * j as f64 / n as f64, PI / n as f64)).collect()
        }
    };
    for &(phi, rho_phi) in &columns {
        let xg = boundary_curve(shape, phi, t);
        for xi in column_xi(xg, ell, rho) {
            candidates.push(Patch::new([xi, phi], [rho, rho_phi]));
        }
    }
    let mut cover = Cover::from_patches(ps, candidates)?;
    if matches!(shape, ObstacleShape::Square) {
        cover = balance(ps, cover)?;
    }
    Ok(cover)
}

/// Grows under-populated patches so the member counts stay within a factor
/// of three of each other.
fn balance(ps: &Pointset, cover: Cover) -> Result<Cover> {
    let max = cover.patches.iter().map(|p| p.members.len()).max().unwrap_or(0);
    let target = max.div_ceil(3);
    let mut patches = cover.patches;
    for p in &mut patches {
        let mut grown = 0;
        while p.members.len() < target && grown < 40 {
            p.semiaxes[0] *= 1.05;
            p.semiaxes[1] *= 1.05;
            p.members = ps
                .nodes()
                .iter()
                .enumerate()
                .filter(|(_, n)| p.contains(n.coords()))
                .map(|(i, _)| i)
                .collect();
            grown += 1;
        }
    }
    Cover::from_patches(ps, patches)
}

/// Shepard weight and its first and second derivatives for one patch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeightDerivatives {
    pub w: f64,
    pub d1: f64,
    pub d2: f64,
    pub d11: f64,
    pub d22: f64,
    pub d12: f64,
}

/// Shepard weights `w_i = Phi_i / sum_k Phi_k` of the patches covering `q`.
pub fn shepard_weights(q: [f64; 2], cover: &Cover) -> Result<Vec<(usize, f64)>> {
    let bumps: Vec<(usize, f64)> = cover
        .covering(q)
        .into_iter()
        .map(|j| (j, cover.patches[j].bump(q)[0]))
        .collect();
    let total: f64 = bumps.iter().map(|b| b.1).sum();
    if !(total > 0.0) {
        return Err(Error::UncoveredPoint(q[0], q[1]));
    }
    Ok(bumps.into_iter().map(|(j, v)| (j, v / total)).collect())
}

/// Shepard weights with derivatives, by the quotient rule.
pub fn shepard_weight_derivatives(q: [f64; 2], cover: &Cover) -> Result<Vec<(usize, WeightDerivatives)>> {
    let covering = cover.covering(q);
    weight_derivatives_on(q, cover, &covering)
}

/// Same as [`shepard_weight_derivatives`] for a known covering set.
pub(crate) fn weight_derivatives_on(
    q: [f64; 2],
    cover: &Cover,
    covering: &[usize],
) -> Result<Vec<(usize, WeightDerivatives)>> {
    let bumps: Vec<[f64; 6]> = covering.iter().map(|&j| cover.patches[j].bump(q)).collect();
    let mut sum = [0.0; 6];
    for b in &bumps {
        for (s, v) in sum.iter_mut().zip(b) {
            *s += v;
        }
    }
    if !(sum[0] > 0.0) {
        return Err(Error::UncoveredPoint(q[0], q[1]));
    }
    let [s, s1, s2, s11, s22, s12] = sum;
    Ok(covering
        .iter()
        .zip(bumps)
        .map(|(&j, [p, p1, p2, p11, p22, p12])| {
            let w = p / s;
            let d1 = (p1 - w * s1) / s;
            let d2 = (p2 - w * s2) / s;
            let d11 = (p11 - 2.0 * d1 * s1 - w * s11) / s;
            let d22 = (p22 - 2.0 * d2 * s2 - w * s22) / s;
            let d12 = (p12 - d1 * s2 - d2 * s1 - w * s12) / s;
            (j, WeightDerivatives { w, d1, d2, d11, d22, d12 })
        })
        .collect())
}
