//! Post-processing of a converged solution: physical velocity, vorticity,
//! surface profiles, drag, the recirculation bubble and residual sampling.

use std::f64::consts::PI;

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    inside_obstacle, physical_coords, radius_of, transformed_coords, NodeTag, ObstacleShape,
};
use crate::rbf::Operator;
use crate::system::{transformed_residual, FlowSystem, LocalDerivatives, P, VPHI, VXI};

/// Abscissa of the rear stagnation point; every shape has half-width 1.
pub const X_REAR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowMetrics {
    pub re: f64,
    pub c_p: f64,
    pub c_omega: f64,
    pub c_d: f64,
    /// Bubble length behind the body, in diameters.
    pub wake_length: f64,
    /// Eddy centre `(a, b)`: `a` is the streamwise distance from the rear
    /// stagnation point and `b` the gap between the twin centres, both in
    /// diameters.
    pub eddy_centre: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ResidualStats {
    pub rms: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ResidualReport {
    pub r1: ResidualStats,
    pub r2: ResidualStats,
    pub r3: ResidualStats,
    pub samples: usize,
}

impl ResidualReport {
    pub fn stats(&self) -> [ResidualStats; 3] {
        [self.r1, self.r2, self.r3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurfacePoint {
    /// Angle from the front stagnation point, `pi - phi`.
    pub phi_plot: f64,
    /// Surface pressure normalised by the dynamic pressure.
    pub pressure: f64,
    pub vorticity: f64,
}

/// One sample of the physical field on the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldSample {
    pub x: f64,
    pub y: f64,
    pub inside: bool,
    pub u: f64,
    pub v: f64,
    pub p: f64,
    pub omega: f64,
}

/// Physical evaluation grid `[-2:0.2:8] x [0:0.2:5]`, row by row in `y`.
pub fn evaluation_grid() -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(51 * 26);
    for j in 0..=25 {
        for i in 0..=50 {
            out.push((-2.0 + 0.2 * i as f64, 0.2 * j as f64));
        }
    }
    out
}

/// A nodal solution vector together with the system it belongs to.
#[derive(Debug, Clone, Copy)]
pub struct Solution<'a> {
    sys: &'a FlowSystem,
    x: &'a [f64],
    re: f64,
}

impl<'a> Solution<'a> {
    pub fn new(sys: &'a FlowSystem, x: &'a [f64], re: f64) -> Result<Self> {
        if x.len() != 3 * sys.n() {
            return Err(Error::InvalidParameter(format!("solution has {} entries, expected {}", x.len(), 3 * sys.n())));
        }
        if !(re > 0.0) {
            return Err(Error::InvalidParameter(format!("Reynolds number must be > 0, got {re}")));
        }
        Ok(Self { sys, x, re })
    }

    pub fn re(&self) -> f64 {
        self.re
    }

    fn ell(&self) -> f64 {
        self.sys.transform().ell()
    }

    fn field(&self, f: usize) -> &[f64] {
        let n = self.sys.n();
        &self.x[f * n..(f + 1) * n]
    }

    /// Values and derivatives of all fields at a transformed point.
    pub fn local(&self, q: [f64; 2]) -> Result<LocalDerivatives> {
        let s = self.sys.interpolator().stencil(q)?;
        let mut d = [[0.0; 5]; 3];
        for (f, df) in d.iter_mut().enumerate() {
            let xf = self.field(f);
            for (k, w) in &s {
                for op in 0..5 {
                    df[op] += w[op] * xf[*k];
                }
            }
        }
        Ok(d)
    }

    /// Cartesian velocity at a transformed point.
    pub fn physical_velocity(&self, q: [f64; 2]) -> Result<(f64, f64)> {
        if q[0] >= self.ell() {
            return Ok((1.0, 0.0));
        }
        let d = self.local(q)?;
        Ok(polar_to_cartesian(d[VXI][0], d[VPHI][0], q[1]))
    }

    /// Vorticity at a transformed point.
    pub fn vorticity(&self, q: [f64; 2]) -> Result<f64> {
        if q[0] >= self.ell() {
            return Ok(0.0);
        }
        let d = self.local(q)?;
        Ok(vorticity_from(q[0], self.ell(), &d))
    }

    /// Velocity at a physical point of the upper half plane.
    pub fn velocity_at(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let q = self.transformed_outside(x, y)?;
        self.physical_velocity(q)
    }

    fn transformed_outside(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        let (xi, phi) = transformed_coords(x, y, self.sys.transform())?;
        if inside_obstacle(self.sys.shape(), xi, phi, self.sys.transform()) {
            return Err(Error::Domain(format!("({x}, {y}) lies inside the obstacle")));
        }
        Ok([xi, phi])
    }

    /// Vorticity at every node, from the differentiation matrices.
    pub fn nodal_vorticity(&self) -> Vec<f64> {
        let ops = self.sys.ops();
        let dxi_v = ops.get(Operator::Dxi).mul_vec(self.field(VPHI));
        let dphi_u = ops.get(Operator::Dphi).mul_vec(self.field(VXI));
        let v = self.field(VPHI);
        let ell = self.ell();
        self.sys
            .pointset()
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let a = ell - n.xi;
                a / ell * (a * dxi_v[i] - dphi_u[i] + v[i])
            })
            .collect()
    }

    /// Pressure and vorticity on the body, ordered from the front stagnation point.
    pub fn surface_profiles(&self) -> Vec<SurfacePoint> {
        let omega = self.nodal_vorticity();
        let p = self.field(P);
        let nodes = self.sys.pointset().nodes();
        let mut out: Vec<SurfacePoint> = self
            .sys
            .pointset()
            .range(NodeTag::Cylinder)
            .map(|i| SurfacePoint { phi_plot: PI - nodes[i].phi, pressure: 2.0 * p[i], vorticity: omega[i] })
            .collect();
        out.sort_by(|a, b| a.phi_plot.total_cmp(&b.phi_plot));
        out
    }

    /// `(c_p, c_omega, c_d)`, integrating over both halves of the body.
    pub fn drag(&self) -> (f64, f64, f64) {
        let omega = self.nodal_vorticity();
        let p = self.field(P);
        let nodes = self.sys.pointset().nodes();
        let mut surf: Vec<(f64, f64, f64)> = self
            .sys
            .pointset()
            .range(NodeTag::Cylinder)
            .map(|i| (nodes[i].phi, 2.0 * p[i], omega[i]))
            .collect();
        surf.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (cp, cw) = drag_integrals(self.sys.shape(), &surf, self.re);
        (cp, cw, cp + cw)
    }

    /// `u` on the downstream axis at physical abscissa `x`.
    fn axis_u(&self, x: f64) -> Result<f64> {
        let ell = self.ell();
        let xi = ell * (1.0 - 1.0 / x);
        let d = self.local([xi, 0.0])?;
        Ok(d[VXI][0])
    }

    /// Length of the recirculation bubble in diameters, and the physical
    /// abscissa where it closes.
    pub fn wake(&self) -> Result<(f64, f64)> {
        let ell = self.ell();
        let samples = 400;
        let xi_at = |k: usize| ell * (k as f64) / (samples as f64) * (1.0 - 1e-3);
        let x_of = |xi: f64| radius_of(xi, self.sys.transform());
        let mut roots = Vec::new();
        let mut prev = (x_of(xi_at(1)), self.axis_u(x_of(xi_at(1)))?);
        for k in 2..=samples {
            let x = x_of(xi_at(k));
            let u = self.axis_u(x)?;
            if prev.1 < 0.0 && u >= 0.0 {
                roots.push((prev.0, x));
            }
            prev = (x, u);
        }
        let Some(&(mut lo, mut hi)) = roots.last() else {
            return Ok((0.0, X_REAR));
        };
        if roots.len() > 1 {
            warn!("{} sign changes of u on the wake axis; using the furthest", roots.len());
        }
        while hi - lo > 1e-6 {
            let mid = 0.5 * (lo + hi);
            if self.axis_u(mid)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x_root = 0.5 * (lo + hi);
        Ok(((x_root - X_REAR) / 2.0, x_root))
    }

    pub fn wake_length(&self) -> Result<f64> {
        Ok(self.wake()?.0)
    }

    /// Centre of the upper standing eddy. `a` is its streamwise distance
    /// from the rear stagnation point in diameters and `b` the gap between
    /// the twin eddy centres in diameters, which equals the height of the
    /// upper centre in radii.
    pub fn eddy_centre(&self) -> Result<(f64, f64)> {
        let (length, x_root) = self.wake()?;
        if length <= 0.0 {
            return Err(Error::EddySearch("no recirculation bubble".into()));
        }
        let bubble = x_root - X_REAR;
        let bounds = EddyBox { x_min: X_REAR, x_max: X_REAR + 3.0 * bubble, y_max: 2.0 };
        let first = match self.eddy_newton([X_REAR + length, 0.5], &bounds) {
            Ok(p) => return Ok(((p[0] - X_REAR) / 2.0, p[1])),
            Err(e) => e,
        };
        for seed in self.eddy_seeds(&bounds)? {
            if let Ok(p) = self.eddy_newton(seed, &bounds) {
                return Ok(((p[0] - X_REAR) / 2.0, p[1]));
            }
        }
        Err(first)
    }

    fn eddy_velocity(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let (u, v) = self.velocity_at(p[0], p[1])?;
        Ok([u, v])
    }

    /// Local minima of the speed on a grid over the box, slowest first.
    /// The no-slip layer is skipped since the speed vanishes there anyway.
    fn eddy_seeds(&self, b: &EddyBox) -> Result<Vec<[f64; 2]>> {
        let n = 48;
        let at = |i: usize, j: usize| [b.x_min + (b.x_max - b.x_min) * i as f64 / n as f64, b.y_max * j as f64 / n as f64];
        let mut speed = vec![f64::INFINITY; (n + 1) * (n + 1)];
        for i in 0..=n {
            for j in 1..=n {
                let p = at(i, j);
                if p[0].hypot(p[1]) <= 1.05 {
                    continue;
                }
                if let Ok(f) = self.eddy_velocity(p) {
                    speed[i * (n + 1) + j] = f[0].hypot(f[1]);
                }
            }
        }
        let mut minima = Vec::new();
        for i in 1..n {
            for j in 2..n {
                let s = speed[i * (n + 1) + j];
                if !s.is_finite() {
                    continue;
                }
                let lowest = (i - 1..=i + 1)
                    .flat_map(|a| (j - 1..=j + 1).map(move |c| (a, c)))
                    .filter(|&(a, c)| (a, c) != (i, j))
                    .all(|(a, c)| s <= speed[a * (n + 1) + c]);
                if lowest {
                    minima.push((s, at(i, j)));
                }
            }
        }
        if minima.is_empty() {
            return Err(Error::EddySearch("no admissible seed".into()));
        }
        minima.sort_by(|x, y| x.0.total_cmp(&y.0));
        Ok(minima.into_iter().map(|m| m.1).collect())
    }

    /// Damped Newton iteration for `(u, v) = 0` with a central difference
    /// Jacobian, confined to the box.
    fn eddy_newton(&self, start: [f64; 2], b: &EddyBox) -> Result<[f64; 2]> {
        let norm = |f: [f64; 2]| f[0].hypot(f[1]);
        let mut p = start;
        let mut f = self.eddy_velocity(p)?;
        for _ in 0..60 {
            if norm(f) < 1e-11 {
                break;
            }
            let j = self.velocity_gradient(p)?;
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det == 0.0 || !det.is_finite() {
                return Err(Error::EddySearch("singular velocity gradient".into()));
            }
            let step = [
                -(j[1][1] * f[0] - j[0][1] * f[1]) / det,
                -(-j[1][0] * f[0] + j[0][0] * f[1]) / det,
            ];
            let mut t = 1.0;
            let mut moved = false;
            while t >= 1e-6 {
                let cand = [p[0] + t * step[0], p[1] + t * step[1]];
                if b.contains(cand) {
                    if let Ok(fc) = self.eddy_velocity(cand) {
                        if norm(fc) < norm(f) {
                            p = cand;
                            f = fc;
                            moved = true;
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            // Stalled: either at the root to roundoff or stuck, the final
            // check tells which.
            if !moved || t * step[0].hypot(step[1]) < 1e-12 {
                break;
            }
        }
        // the interpolated velocity carries roundoff near 1e-8, so a stall
        // below 1e-6 of the free stream counts as the root
        if norm(f) > 1e-6 {
            return Err(Error::EddySearch(format!("velocity {:.3e} at ({:.4}, {:.4})", norm(f), p[0], p[1])));
        }
        // a vortex centre rotates; the stagnation point closing the bubble
        // is a saddle
        let j = self.velocity_gradient(p)?;
        if j[0][0] * j[1][1] - j[0][1] * j[1][0] <= 0.0 {
            return Err(Error::EddySearch(format!("saddle point at ({:.4}, {:.4})", p[0], p[1])));
        }
        Ok(p)
    }

    /// Central difference gradient of the physical velocity.
    fn velocity_gradient(&self, p: [f64; 2]) -> Result<[[f64; 2]; 2]> {
        let h = 1e-6;
        let fx = self.eddy_velocity([p[0] + h, p[1]])?;
        let fxm = self.eddy_velocity([p[0] - h, p[1]])?;
        let fy = self.eddy_velocity([p[0], p[1] + h])?;
        let fym = self.eddy_velocity([p[0], p[1] - h])?;
        Ok([
            [(fx[0] - fxm[0]) / (2.0 * h), (fy[0] - fym[0]) / (2.0 * h)],
            [(fx[1] - fxm[1]) / (2.0 * h), (fy[1] - fym[1]) / (2.0 * h)],
        ])
    }

    /// RMS and maximum of the pointwise residuals over the physical
    /// evaluation grid, skipping points inside the body.
    pub fn residual_report(&self) -> Result<ResidualReport> {
        let ell = self.ell();
        let mut acc = [(0.0f64, 0.0f64); 3];
        let mut count = 0;
        for (x, y) in evaluation_grid() {
            let Ok(q) = self.transformed_outside(x, y) else { continue };
            let d = self.local(q)?;
            let w = transformed_residual(q[0], ell, self.re, &d);
            for (a, r) in acc.iter_mut().zip(w) {
                a.0 += r * r;
                a.1 = a.1.max(r.abs());
            }
            count += 1;
        }
        let stats = |a: (f64, f64)| ResidualStats { rms: (a.0 / count as f64).sqrt(), max: a.1 };
        Ok(ResidualReport { r1: stats(acc[0]), r2: stats(acc[1]), r3: stats(acc[2]), samples: count })
    }

    /// Velocity, pressure and vorticity on the evaluation grid.
    pub fn field_samples(&self) -> Result<Vec<FieldSample>> {
        let ell = self.ell();
        evaluation_grid()
            .into_iter()
            .map(|(x, y)| match self.transformed_outside(x, y) {
                Err(_) => Ok(FieldSample { x, y, inside: true, u: 0.0, v: 0.0, p: 0.0, omega: 0.0 }),
                Ok(q) => {
                    let d = self.local(q)?;
                    let (u, v) = polar_to_cartesian(d[VXI][0], d[VPHI][0], q[1]);
                    Ok(FieldSample { x, y, inside: false, u, v, p: d[P][0], omega: vorticity_from(q[0], ell, &d) })
                }
            })
            .collect()
    }

    /// Drag, wake length and eddy centre. The eddy centre is absent when
    /// there is no bubble or the search fails.
    pub fn metrics(&self) -> Result<FlowMetrics> {
        let (c_p, c_omega, c_d) = self.drag();
        let wake_length = self.wake_length()?;
        let eddy_centre = if wake_length > 0.0 {
            match self.eddy_centre() {
                Ok(c) => Some(c),
                Err(e) => {
                    warn!("{e}");
                    None
                }
            }
        } else {
            None
        };
        Ok(FlowMetrics { re: self.re, c_p, c_omega, c_d, wake_length, eddy_centre })
    }

    /// Physical coordinates of node `i`, `None` on the far field.
    pub fn node_position(&self, i: usize) -> Result<Option<(f64, f64)>> {
        let n = self.sys.pointset().nodes()[i];
        physical_coords(n.xi, n.phi, self.sys.transform())
    }
}

/// `(u, v)` from the polar components at angle `phi`.
pub fn polar_to_cartesian(v_xi: f64, v_phi: f64, phi: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    (v_xi * c - v_phi * s, v_xi * s + v_phi * c)
}

/// Vorticity from local transformed derivatives.
pub fn vorticity_from(xi: f64, ell: f64, d: &LocalDerivatives) -> f64 {
    let a = ell - xi;
    a / ell * (a * d[VPHI][1] - d[VXI][2] + d[VPHI][0])
}

/// Pressure and viscous drag from surface samples `(phi, p_gamma, omega)`
/// sorted by angle. Trapezoid rule per interval, with the body normal taken
/// from inside each interval so corners are handled one-sidedly.
pub fn drag_integrals(shape: ObstacleShape, surf: &[(f64, f64, f64)], re: f64) -> (f64, f64) {
    let integrand = |(phi, p, w): (f64, f64, f64), from_left: bool| {
        let (r, dr) = shape.surface_radius_one_sided(phi, from_left);
        let (s, c) = phi.sin_cos();
        let nx = dr * s + r * c;
        let ny = r * s - dr * c;
        (-p * nx, -4.0 / re * w * ny)
    };
    let mut cp = 0.0;
    let mut cw = 0.0;
    for pair in surf.windows(2) {
        let dphi = pair[1].0 - pair[0].0;
        let a = integrand(pair[0], false);
        let b = integrand(pair[1], true);
        cp += 0.5 * dphi * (a.0 + b.0);
        cw += 0.5 * dphi * (a.1 + b.1);
    }
    (cp, cw)
}

/// Search region of the eddy centre in physical coordinates.
struct EddyBox {
    x_min: f64,
    x_max: f64,
    y_max: f64,
}

impl EddyBox {
    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] > 0.0 && p[1] <= self.y_max
    }
}
