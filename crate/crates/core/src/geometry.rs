//! Obstacle shapes, the radial compression map and pointset generation.
//!
//! The exterior of the obstacle in the upper half plane is mapped onto a
//! bounded computational domain through `xi = ell * (1 - 1/r)`, so that the
//! obstacle surface lands near `xi = 0` and the point at infinity at
//! `xi = ell`. All pointsets live in `(xi, phi)` coordinates.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use crate::error::{Error, Result};

/// Tolerance used when deciding whether a coordinate sits on a boundary.
const TAG_TOL: f64 = 1e-12;

/// Stretching factor of the compression map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    ell: f64,
}

impl TransformParams {
    pub fn new(ell: f64) -> Result<Self> {
        if !(ell >= 1.0) || !ell.is_finite() {
            return Err(Error::InvalidParameter(format!("ell must be >= 1, got {ell}")));
        }
        Ok(Self { ell })
    }

    #[inline]
    pub fn ell(&self) -> f64 {
        self.ell
    }
}

impl Default for TransformParams {
    fn default() -> Self {
        Self { ell: 2.0 }
    }
}

/// Physical radius, with the point at infinity kept distinct from finite values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    Finite(f64),
    Infinite,
}

impl Radius {
    pub fn finite(self) -> Option<f64> {
        match self {
            Radius::Finite(r) => Some(r),
            Radius::Infinite => None,
        }
    }
}

/// Cross-section of the immersed body. All variants have half-width 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObstacleShape {
    Circle,
    /// `x^(2 alpha) + y^(2 alpha) = 1`.
    RoundedSquare(u32),
    Square,
}

impl ObstacleShape {
    pub fn rounded(alpha: u32) -> Result<Self> {
        if alpha == 0 {
            return Err(Error::InvalidParameter("rounded square needs alpha >= 1".into()));
        }
        Ok(ObstacleShape::RoundedSquare(alpha))
    }

    /// Circle-like shapes use the plain tensor grid and patch grid.
    pub fn is_circle(&self) -> bool {
        matches!(self, ObstacleShape::Circle | ObstacleShape::RoundedSquare(1))
    }

    /// Physical radius of the body surface in direction `phi`, and its
    /// derivative with respect to `phi`.
    pub fn surface_radius(&self, phi: f64) -> (f64, f64) {
        let (s, c) = phi.sin_cos();
        match *self {
            ObstacleShape::Circle | ObstacleShape::RoundedSquare(1) => (1.0, 0.0),
            ObstacleShape::RoundedSquare(alpha) => {
                let a = alpha as f64;
                // g = cos^(2a) + sin^(2a); r = g^(-1/(2a))
                let c2 = c.powi(2 * alpha as i32);
                let s2 = s.powi(2 * alpha as i32);
                let g = c2 + s2;
                // dg/dphi = 2a (sin^(2a-1) cos - cos^(2a-1) sin)
                let dg = 2.0 * a * (s.powi(2 * alpha as i32 - 1) * c - c.powi(2 * alpha as i32 - 1) * s);
                let r = g.powf(-1.0 / (2.0 * a));
                let dr = -1.0 / (2.0 * a) * g.powf(-1.0 / (2.0 * a) - 1.0) * dg;
                (r, dr)
            }
            ObstacleShape::Square => match square_face(phi) {
                SquareFace::Rear => (1.0 / c, s / (c * c)),
                SquareFace::Top => (1.0 / s, -c / (s * s)),
                SquareFace::Front => (-1.0 / c, -s / (c * c)),
            },
        }
    }

    /// Angles where the surface is not smooth; integrals over the surface are
    /// split there.
    pub fn corners(&self) -> Vec<f64> {
        match self {
            ObstacleShape::Square => vec![FRAC_PI_4, 3.0 * FRAC_PI_4],
            _ => Vec::new(),
        }
    }

    /// One-sided surface radius derivative at a corner (`left = true` takes
    /// the limit from smaller `phi`).
    pub fn surface_radius_one_sided(&self, phi: f64, left: bool) -> (f64, f64) {
        let nudge = if left { -1e-13 } else { 1e-13 };
        let (_, dr) = self.surface_radius((phi + nudge).clamp(0.0, PI));
        (self.surface_radius(phi).0, dr)
    }
}

enum SquareFace {
    Rear,
    Top,
    Front,
}

fn square_face(phi: f64) -> SquareFace {
    if phi < FRAC_PI_4 {
        SquareFace::Rear
    } else if phi < 3.0 * FRAC_PI_4 {
        SquareFace::Top
    } else {
        SquareFace::Front
    }
}

/// Position of a node relative to the domain boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeTag {
    Interior,
    Far,
    Cylinder,
    Axis,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub xi: f64,
    pub phi: f64,
    pub tag: NodeTag,
}

impl Node {
    #[inline]
    pub fn coords(&self) -> [f64; 2] {
        [self.xi, self.phi]
    }
}

/// Sinh clustering parameter used for the square cylinder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    lambda: f64,
}

impl ClusterParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("cluster lambda must be > 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

/// Ordered, classified collocation nodes.
#[derive(Debug, Clone)]
pub struct Pointset {
    nodes: Vec<Node>,
    n_interior: usize,
    n_far: usize,
    n_cyl: usize,
    n_axis: usize,
}

impl Pointset {
    /// Sorts nodes into interior / far / cylinder / axis order and checks
    /// that no two nodes coincide.
    pub fn from_nodes(mut nodes: Vec<Node>) -> Result<Self> {
        // stable: keeps the generation order inside each class
        nodes.sort_by_key(|n| n.tag);
        let count = |t: NodeTag| nodes.iter().filter(|n| n.tag == t).count();
        let ps = Self {
            n_interior: count(NodeTag::Interior),
            n_far: count(NodeTag::Far),
            n_cyl: count(NodeTag::Cylinder),
            n_axis: count(NodeTag::Axis),
            nodes,
        };
        ps.check_distinct()?;
        Ok(ps)
    }

    fn check_distinct(&self) -> Result<()> {
        let mut idx: Vec<usize> = (0..self.nodes.len()).collect();
        idx.sort_by(|&a, &b| {
            let (p, q) = (&self.nodes[a], &self.nodes[b]);
            p.phi.total_cmp(&q.phi).then(p.xi.total_cmp(&q.xi))
        });
        for w in idx.windows(2) {
            let (p, q) = (&self.nodes[w[0]], &self.nodes[w[1]]);
            if (p.xi - q.xi).abs() < TAG_TOL && (p.phi - q.phi).abs() < TAG_TOL {
                return Err(Error::Assembly(format!(
                    "duplicate nodes {} and {} at ({}, {})",
                    w[0], w[1], p.xi, p.phi
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn n_far(&self) -> usize {
        self.n_far
    }

    pub fn n_cyl(&self) -> usize {
        self.n_cyl
    }

    pub fn n_axis(&self) -> usize {
        self.n_axis
    }

    pub fn n_boundary(&self) -> usize {
        self.n_far + self.n_cyl + self.n_axis
    }

    /// Index ranges of each node class in the ordered node list.
    pub fn range(&self, tag: NodeTag) -> std::ops::Range<usize> {
        let i = self.n_interior;
        let f = i + self.n_far;
        let c = f + self.n_cyl;
        let a = c + self.n_axis;
        match tag {
            NodeTag::Interior => 0..i,
            NodeTag::Far => i..f,
            NodeTag::Cylinder => f..c,
            NodeTag::Axis => c..a,
        }
    }

    pub fn indices(&self, tag: NodeTag) -> Vec<usize> {
        self.range(tag).collect()
    }
}

/// `xi = ell (1 - 1/r)`; `r = inf` maps to `ell`.
pub fn compress_radius(r: f64, t: &TransformParams) -> Result<f64> {
    if r.is_nan() || r < 1.0 {
        return Err(Error::Domain(format!("radius {r} lies inside the unit obstacle")));
    }
    if r.is_infinite() {
        return Ok(t.ell);
    }
    Ok(t.ell * (1.0 - 1.0 / r))
}

/// Inverse of [`compress_radius`]; `xi = ell` is the point at infinity.
pub fn decompress_radius(xi: f64, t: &TransformParams) -> Result<Radius> {
    if xi.is_nan() || xi < 0.0 || xi > t.ell {
        return Err(Error::Domain(format!("xi = {xi} outside [0, {}]", t.ell)));
    }
    if xi == t.ell {
        return Ok(Radius::Infinite);
    }
    Ok(Radius::Finite(t.ell / (t.ell - xi)))
}

/// Cartesian coordinates of a transformed point.
pub fn physical_coords(xi: f64, phi: f64, t: &TransformParams) -> Result<Option<(f64, f64)>> {
    match decompress_radius(xi, t)? {
        Radius::Infinite => Ok(None),
        Radius::Finite(r) => Ok(Some((r * phi.cos(), r * phi.sin()))),
    }
}

/// Transformed coordinates `(xi, phi)` of a physical point in the closed
/// upper half plane (`y >= 0`).
pub fn transformed_coords(x: f64, y: f64, t: &TransformParams) -> Result<(f64, f64)> {
    let r = x.hypot(y);
    let phi = y.max(0.0).atan2(x);
    let xi = compress_radius(r, t)?;
    Ok((xi, phi))
}

/// Body surface in transformed coordinates, `xi_gamma(phi)`.
pub fn boundary_curve(shape: ObstacleShape, phi: f64, t: &TransformParams) -> f64 {
    let ell = t.ell;
    match shape {
        ObstacleShape::Circle | ObstacleShape::RoundedSquare(1) => 0.0,
        ObstacleShape::RoundedSquare(alpha) => {
            let a2 = 2 * alpha as i32;
            let g = phi.cos().powi(a2) + phi.sin().powi(a2);
            ell * (1.0 - g.powf(1.0 / a2 as f64))
        }
        ObstacleShape::Square => match square_face(phi) {
            SquareFace::Rear => ell * (1.0 - phi.cos()),
            SquareFace::Top => ell * (1.0 - phi.sin()),
            SquareFace::Front => ell * (1.0 - (PI - phi).cos()),
        },
    }
}

/// Whether a transformed point lies strictly inside the obstacle.
pub fn inside_obstacle(shape: ObstacleShape, xi: f64, phi: f64, t: &TransformParams) -> bool {
    xi < boundary_curve(shape, phi, t) - TAG_TOL
}

/// Angles on `[0, pi/2]` clustered around `pi/4` by a sinh stretching.
///
/// `eta` runs over `n` equispaced values in
/// `[asinh(-pi/(4 lambda)), asinh(pi/(4 lambda))]` and each angle is
/// `pi/4 + lambda sinh(eta)`. The endpoints are pinned to `0` and `pi/2`
/// exactly and the midpoint to `pi/4`.
pub fn cluster_phi(n: usize, c: &ClusterParams) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("cluster_phi needs n >= 3, got {n}")));
    }
    let lam = c.lambda;
    let eta_max = (FRAC_PI_4 / lam).asinh();
    let mut out: Vec<f64> = (0..n)
        .map(|j| {
            let eta = -eta_max + 2.0 * eta_max * j as f64 / (n - 1) as f64;
            FRAC_PI_4 + lam * eta.sinh()
        })
        .collect();
    out[0] = 0.0;
    out[n - 1] = FRAC_PI_2;
    if n % 2 == 1 {
        out[n / 2] = FRAC_PI_4;
    }
    Ok(out)
}

/// The clustered angle grid on `[0, pi]`: the `[0, pi/2]` cluster around
/// `pi/4` mirrored onto `[pi/2, pi]` around `3 pi/4`.
pub fn clustered_phi_grid(n_side: usize, c: &ClusterParams) -> Result<Vec<f64>> {
    let half = cluster_phi(n_side, c)?;
    let mut out = half.clone();
    out.extend(half.iter().skip(1).map(|p| p + FRAC_PI_2));
    *out.last_mut().unwrap() = PI;
    Ok(out)
}

/// Number of grid intervals covering `length` at spacing close to `h`.
pub(crate) fn intervals(length: f64, h: f64) -> usize {
    ((length / h).round() as usize).max(1)
}

/// Angle grid used for a given shape: uniform for circles and rounded
/// squares, sinh-clustered around the corners for the square.
pub fn phi_grid(shape: ObstacleShape, h: f64, c: &ClusterParams) -> Result<Vec<f64>> {
    match shape {
        ObstacleShape::Square => clustered_phi_grid(intervals(FRAC_PI_2, h) + 1, c),
        _ => {
            let n = intervals(PI, h);
            let mut v: Vec<f64> = (0..=n).map(|j| PI * j as f64 / n as f64).collect();
            v[n] = PI;
            Ok(v)
        }
    }
}

/// `xi` values of one body-fitted column, evenly spaced from the surface to
/// the far field.
pub(crate) fn column_xi(xi_gamma: f64, ell: f64, h: f64) -> Vec<f64> {
    let span = ell - xi_gamma;
    let m = ((span / h - 1e-9).ceil() as usize).max(1);
    let mut v: Vec<f64> = (0..=m).map(|k| xi_gamma + span * k as f64 / m as f64).collect();
    v[m] = ell;
    v
}

fn classify(xi: f64, phi: f64, xi_gamma: f64, ell: f64) -> NodeTag {
    if (xi - ell).abs() <= TAG_TOL {
        NodeTag::Far
    } else if (xi - xi_gamma).abs() <= TAG_TOL {
        NodeTag::Cylinder
    } else if phi.abs() <= TAG_TOL || (phi - PI).abs() <= TAG_TOL {
        NodeTag::Axis
    } else {
        NodeTag::Interior
    }
}

/// Generates the classified collocation nodes for `shape` at spacing `h`.
///
/// Circles get a tensor grid with `round(ell/h)+1` by `round(pi/h)+1`
/// points. Rounded and sharp squares get body-fitted columns: every angle
/// carries its own evenly spaced column from `xi_gamma(phi)` to `ell`. The
/// square additionally clusters angles around its corners.
pub fn generate_pointset(
    shape: ObstacleShape,
    h: f64,
    t: &TransformParams,
    c: &ClusterParams,
) -> Result<Pointset> {
    let ell = t.ell;
    if !(h > 0.0 && h < ell) {
        return Err(Error::InvalidParameter(format!("spacing h = {h} must lie in (0, {ell})")));
    }
    let phis = phi_grid(shape, h, c)?;
    let mut nodes = Vec::new();
    if shape.is_circle() {
        let n_xi = intervals(ell, h);
        for &phi in &phis {
            for k in 0..=n_xi {
                let xi = if k == n_xi { ell } else { ell * k as f64 / n_xi as f64 };
                nodes.push(Node { xi, phi, tag: classify(xi, phi, 0.0, ell) });
            }
        }
    } else {
        for &phi in &phis {
            let xg = boundary_curve(shape, phi, t);
            for xi in column_xi(xg, ell, h) {
                nodes.push(Node { xi, phi, tag: classify(xi, phi, xg, ell) });
            }
        }
    }
    Pointset::from_nodes(nodes)
}

/// Physical radius of a transformed coordinate below `ell`.
pub(crate) fn radius_of(xi: f64, t: &TransformParams) -> f64 {
    t.ell / (t.ell - xi)
}
