//! Density transport: the solution operator `S[u]` for
//! `rho_t + div(rho u) = eps * Lap(rho)` with zero-flux boundary.
//!
//! The density lives on the quadrature grid as a finite-volume field. One
//! step is donor-cell upwind advection (explicit, conservative, monotone
//! under the CFL condition) followed by backward-Euler diffusion applied
//! axis by axis (each 1-d solve is an M-matrix system, so positivity and
//! exact mass conservation survive). The advecting velocity is a spanned
//! field, so its normal component vanishes identically on the walls.

use crate::basis::{Basis, CoeffVec, MAX_DIM};
use crate::error::{Error, Result};

/// Nonnegative grid density with its cached total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    values: Vec<f64>,
    mass: f64,
}

impl DensityField {
    /// Wrap grid values, rejecting negative entries.
    pub fn new(values: Vec<f64>, basis: &Basis) -> Result<Self> {
        let nc = basis.domain().n_cells();
        if values.len() != nc {
            return Err(Error::ShapeMismatch {
                expected: nc,
                got: values.len(),
            });
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            return Err(Error::NegativeDensity { min });
        }
        let mass = basis.grid_integral(&values);
        Ok(Self { values, mass })
    }

    /// Wrap values that may carry harmless negative rounding noise
    /// (clamped to zero); anything genuinely negative is an error.
    fn from_scheme_output(mut values: Vec<f64>, basis: &Basis) -> Result<Self> {
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        let floor = -1e-13 * max.max(1.0);
        let mut min = f64::INFINITY;
        for v in values.iter_mut() {
            if *v < 0.0 {
                if *v < floor {
                    min = min.min(*v);
                } else {
                    *v = 0.0;
                }
            }
        }
        if min < 0.0 {
            return Err(Error::NegativeDensity { min });
        }
        let mass = basis.grid_integral(&values);
        Ok(Self { values, mass })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-step transport bookkeeping consumed by the renormalized-continuity
/// diagnostics: realized face velocities and the diffusive rate.
#[derive(Debug, Clone)]
pub struct TransportRecord {
    /// Face normal velocity per axis, in the face layout of
    /// [`Basis::face_normal_velocity`].
    pub face_vel: Vec<Vec<f64>>,
    /// Realized diffusive increment `(rho_out - rho_advected) / dt`.
    pub diff_rate: Vec<f64>,
}

/// One conservative transport step. Errors on negative input density and on
/// CFL violation (the error carries the admissible step).
pub fn advance_density(
    rho: &DensityField,
    u: &CoeffVec,
    eps: f64,
    dt: f64,
    basis: &Basis,
    c_cfl: f64,
) -> Result<DensityField> {
    advance_density_recorded(rho, u, eps, dt, basis, c_cfl).map(|(d, _)| d)
}

/// As [`advance_density`], additionally returning the realized face
/// velocities and diffusion rate.
pub fn advance_density_recorded(
    rho: &DensityField,
    u: &CoeffVec,
    eps: f64,
    dt: f64,
    basis: &Basis,
    c_cfl: f64,
) -> Result<(DensityField, TransportRecord)> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let min_in = rho.min();
    if min_in < 0.0 {
        return Err(Error::NegativeDensity { min: min_in });
    }
    let dom = basis.domain();
    let dim = dom.dim();

    let face_vel: Vec<Vec<f64>> = (0..dim).map(|a| basis.face_normal_velocity(u, a)).collect();
    let vmax = face_vel
        .iter()
        .flat_map(|f| f.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    if vmax > 0.0 {
        let admissible = c_cfl * dom.min_spacing() / vmax;
        if dt > admissible * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, admissible });
        }
    }

    // Donor-cell upwind advection, flux-differenced so mass telescopes.
    let nc = dom.n_cells();
    let mut out = rho.values().to_vec();
    for a in 0..dim {
        let na = dom.grid_pts(a);
        let nf = na + 1;
        let lam = dt / dom.spacing(a);
        let faces = &face_vel[a];
        let other_axes: Vec<usize> = (0..dim).filter(|&ax| ax != a).collect();
        let rest: usize = other_axes.iter().map(|&ax| dom.grid_pts(ax)).product();
        let mut idx = [0usize; MAX_DIM];
        for r in 0..rest {
            let mut rr = r;
            for &ax in &other_axes {
                idx[ax] = rr % dom.grid_pts(ax);
                rr /= dom.grid_pts(ax);
            }
            let mut prev_flux = 0.0; // boundary face: exact zero velocity
            for i in 0..na {
                idx[a] = i;
                let c = dom.cell_index(&idx[..dim]);
                let vf = faces[(i + 1) + nf * r];
                let flux = if i + 1 == na {
                    0.0 // boundary face
                } else if vf >= 0.0 {
                    vf * rho.values()[c]
                } else {
                    idx[a] = i + 1;
                    let cr = dom.cell_index(&idx[..dim]);
                    idx[a] = i;
                    vf * rho.values()[cr]
                };
                out[c] -= lam * (flux - prev_flux);
                prev_flux = flux;
            }
        }
    }

    // Backward-Euler diffusion, one tridiagonal Neumann solve per axis.
    let mut diff_rate = vec![0.0; nc];
    if eps > 0.0 {
        let advected = out.clone();
        for a in 0..dim {
            diffuse_axis(&mut out, dom, a, eps * dt);
        }
        for c in 0..nc {
            diff_rate[c] = (out[c] - advected[c]) / dt;
        }
    }

    let field = DensityField::from_scheme_output(out, basis)?;
    Ok((field, TransportRecord { face_vel, diff_rate }))
}

/// In-place backward-Euler step `(I - c * Lap_axis) x = rhs` with zero-flux
/// boundary, via the Thomas algorithm on every grid line.
fn diffuse_axis(f: &mut [f64], dom: &crate::basis::Domain, axis: usize, c: f64) {
    let na = dom.grid_pts(axis);
    let h = dom.spacing(axis);
    let k = c / (h * h);
    let dim = dom.dim();
    let other_axes: Vec<usize> = (0..dim).filter(|&ax| ax != axis).collect();
    let rest: usize = other_axes.iter().map(|&ax| dom.grid_pts(ax)).product();

    let mut rhs = vec![0.0; na];
    let mut diag = vec![0.0; na];
    let mut work = vec![0.0; na];
    let mut idx = [0usize; MAX_DIM];
    let mut line_cells = vec![0usize; na];
    for r in 0..rest {
        let mut rr = r;
        for &ax in &other_axes {
            idx[ax] = rr % dom.grid_pts(ax);
            rr /= dom.grid_pts(ax);
        }
        for i in 0..na {
            idx[axis] = i;
            line_cells[i] = dom.cell_index(&idx[..dim]);
            rhs[i] = f[line_cells[i]];
            let neighbors = if i == 0 || i == na - 1 { 1.0 } else { 2.0 };
            diag[i] = 1.0 + neighbors * k;
        }
        // Thomas forward sweep (constant off-diagonal -k).
        work[0] = -k / diag[0];
        rhs[0] /= diag[0];
        for i in 1..na {
            let m = diag[i] + k * work[i - 1];
            work[i] = -k / m;
            rhs[i] = (rhs[i] + k * rhs[i - 1]) / m;
        }
        for i in (0..na - 1).rev() {
            rhs[i] -= work[i] * rhs[i + 1];
        }
        for i in 0..na {
            f[line_cells[i]] = rhs[i];
        }
    }
}

/// Repeated [`advance_density`]: the discrete solution operator `S[u]`.
/// `u_traj[m]` advects step `m`; returns the densities at all `steps + 1`
/// time-grid points.
pub fn solve_density(
    u_traj: &[CoeffVec],
    rho0: &DensityField,
    eps: f64,
    dt: f64,
    basis: &Basis,
    c_cfl: f64,
) -> Result<Vec<DensityField>> {
    let mut out = Vec::with_capacity(u_traj.len() + 1);
    out.push(rho0.clone());
    for u in u_traj {
        let next = advance_density(out.last().unwrap(), u, eps, dt, basis, c_cfl)?;
        out.push(next);
    }
    Ok(out)
}

/// Two-sided exponential bracket for the density range driven by the
/// realized `sup |div u|` history:
/// `lower(t) = min(rho0) * exp(-int_0^t sup|div u|)` and the mirrored upper
/// bound. Returns one pair per time-grid point (left-Riemann in time).
pub fn density_bounds(
    rho0: &DensityField,
    u_traj: &[CoeffVec],
    dt: f64,
    basis: &Basis,
) -> Result<Vec<(f64, f64)>> {
    let divsup: Vec<f64> = u_traj
        .iter()
        .map(|u| {
            basis
                .divergence(u)
                .map(|d| d.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
        })
        .collect::<Result<_>>()?;
    Ok(bounds_from_divsup(rho0.min(), rho0.max(), &divsup, dt))
}

/// The bracket formula itself, driven by a given `sup |div u|` series.
pub fn bounds_from_divsup(
    rho_min: f64,
    rho_max: f64,
    divsup: &[f64],
    dt: f64,
) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(divsup.len() + 1);
    let mut acc = 0.0;
    out.push((rho_min, rho_max));
    for &d in divsup {
        acc += dt * d;
        out.push((rho_min * (-acc).exp(), rho_max * acc.exp()));
    }
    out
}

/// Ratio `sup_t ||S[u1] - S[u2]||_{H1} / sup_t ||u1 - u2||_{H1}` over a
/// common horizon, the statistic behind the Lipschitz property of `S`.
/// Both trajectories must stay in the bounded class `M_K` (grid W{1,inf}
/// norm at most `K`). Returns 0 when the inputs coincide.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_probe(
    u1_traj: &[CoeffVec],
    u2_traj: &[CoeffVec],
    rho0: &DensityField,
    eps: f64,
    dt: f64,
    basis: &Basis,
    c_cfl: f64,
    class_bound: f64,
) -> Result<f64> {
    if u1_traj.len() != u2_traj.len() {
        return Err(Error::ShapeMismatch {
            expected: u1_traj.len(),
            got: u2_traj.len(),
        });
    }
    for u in u1_traj.iter().chain(u2_traj.iter()) {
        let norm = basis.w1inf_norm(u)?;
        if norm > class_bound {
            return Err(Error::Config(format!(
                "trajectory leaves M_K: W(1,inf) norm {norm:.3e} exceeds K = {class_bound:.3e}"
            )));
        }
    }
    let mut sep: f64 = 0.0;
    for (a, b) in u1_traj.iter().zip(u2_traj) {
        let mut d = a.clone();
        d.axpy(-1.0, b);
        sep = sep.max(basis.h1_norm(&d));
    }
    if sep == 0.0 {
        return Ok(0.0);
    }
    let r1 = solve_density(u1_traj, rho0, eps, dt, basis, c_cfl)?;
    let r2 = solve_density(u2_traj, rho0, eps, dt, basis, c_cfl)?;
    let mut dsep: f64 = 0.0;
    for (f1, f2) in r1.iter().zip(&r2) {
        let diff: Vec<f64> = f1
            .values()
            .iter()
            .zip(f2.values())
            .map(|(x, y)| x - y)
            .collect();
        dsep = dsep.max(grid_h1_norm(&diff, basis)?);
    }
    Ok(dsep / sep)
}

/// H1 norm of a grid scalar: quadrature L2 plus the cosine-interpolant
/// gradient.
pub fn grid_h1_norm(f: &[f64], basis: &Basis) -> Result<f64> {
    let l2 = basis.grid_l2(f);
    let grad = basis.grid_gradient(f)?;
    let g2: f64 = grad.iter().map(|g| basis.grid_l2(g).powi(2)).sum();
    Ok((l2 * l2 + g2).sqrt())
}
