//! Finite-dimensional operators of the scheme: the density-weighted mass
//! operator with inverse and square root, the deterministic drifts of the
//! momentum and induction equations, and the velocity-norm cut-off.
//!
//! Drift assembly mixes exact spectral action (viscous terms are diagonal in
//! the eigenbasis) with pseudo-spectral grid products. Terms that transfer
//! energy between equations are written so the transfer cancels pointwise on
//! the grid: convection and pressure go through the integrated-by-parts form
//! against `grad(phi_j)`, and the induction advection is paired with
//! `curl(phi_j e_c)`, which makes Lorentz work and induction work cancel to
//! rounding in the discrete energy budget.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, CoeffVec};
use crate::error::{Error, Result};
use crate::transport::DensityField;

/// Physical and regularization constants plus discretization controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimParams {
    /// Shear viscosity, positive.
    pub mu: f64,
    /// Bulk viscosity parameter, constrained by `2 mu + 3 lambda >= 0`.
    pub lambda: f64,
    /// Magnetic diffusivity, positive.
    pub nu: f64,
    /// Pressure constant.
    pub a: f64,
    /// Adiabatic exponent, `gamma > 3/2`.
    pub gamma: f64,
    /// Artificial pressure exponent, `beta > max(4, gamma)`.
    pub beta: f64,
    /// Artificial pressure weight, nonnegative.
    pub delta: f64,
    /// Artificial viscosity in the continuity equation, nonnegative.
    pub eps: f64,
    /// Cut-off level N for the velocity-norm truncation.
    pub n_cutoff: f64,
    /// Number of retained stochastic modes per channel.
    pub k_modes: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            lambda: 0.0,
            nu: 1.0,
            a: 1.0,
            gamma: 5.0 / 3.0,
            beta: 5.0,
            delta: 1e-3,
            eps: 1e-3,
            n_cutoff: 10.0,
            k_modes: 8,
        }
    }
}

impl SimParams {
    /// Check every parameter invariant; the message names the violated one.
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.5) {
            return Err(Error::Config(format!(
                "gamma must exceed 3/2, got {}",
                self.gamma
            )));
        }
        if !(self.beta > self.gamma.max(4.0)) {
            return Err(Error::Config(format!(
                "beta must exceed max{{4, gamma}} = {}, got {}",
                self.gamma.max(4.0),
                self.beta
            )));
        }
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if 2.0 * self.mu + 3.0 * self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "2 mu + 3 lambda must be nonnegative, got {}",
                2.0 * self.mu + 3.0 * self.lambda
            )));
        }
        if !(self.nu > 0.0) {
            return Err(Error::Config(format!("nu must be positive, got {}", self.nu)));
        }
        if !(self.a > 0.0) {
            return Err(Error::Config(format!("a must be positive, got {}", self.a)));
        }
        if self.delta < 0.0 || self.eps < 0.0 {
            return Err(Error::Config(format!(
                "delta and eps must be nonnegative, got delta = {}, eps = {}",
                self.delta, self.eps
            )));
        }
        if !(self.n_cutoff > 0.0) {
            return Err(Error::Config(format!(
                "cut-off level N must be positive, got {}",
                self.n_cutoff
            )));
        }
        if self.k_modes == 0 {
            return Err(Error::Config("k_modes must be at least 1".into()));
        }
        Ok(())
    }
}

/// The density-weighted Gram operator on the Galerkin space,
/// `<M[rho] v, w> = int rho v . w`, with cached Cholesky factor and
/// symmetric PSD square root.
///
/// Vector fields use the scalar basis componentwise, so the full operator is
/// block-diagonal with `dim` copies of the scalar block; only the scalar
/// block is stored.
#[derive(Debug, Clone)]
pub struct MassOp {
    scalar: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// Symmetric PSD square root, built on first use.
    sqrt: OnceLock<DMatrix<f64>>,
    /// Dense inverse, built on first use (diagnostics only).
    inv: OnceLock<DMatrix<f64>>,
    /// (min, max) eigenvalue of the scalar block, built on first use.
    eig_range: OnceLock<(f64, f64)>,
    dim: usize,
}

/// Assemble `M[rho]`. The density must be strictly positive.
pub fn mass_op(rho: &DensityField, basis: &Basis) -> Result<MassOp> {
    let min = rho.min();
    if !(min > 0.0) {
        return Err(Error::NonPositiveDensity { min });
    }
    let w = basis.domain().cell_volume();
    // M = w * P^T diag(rho) P, assembled as one weighted GEMM and then
    // symmetrized against rounding.
    let mut weighted = basis.phi_matrix().clone();
    for (mut row, &r) in weighted.row_iter_mut().zip(rho.values()) {
        row *= r;
    }
    let mut m = basis.phi_matrix().tr_mul(&weighted);
    m *= w;
    let mt = m.transpose();
    m = (m + mt) * 0.5;
    // The Cholesky factorization doubles as the positive-definiteness
    // check; eigenvalues are computed lazily for diagnostics.
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NonPositiveDensity { min })?;
    Ok(MassOp {
        scalar: m,
        chol,
        sqrt: OnceLock::new(),
        inv: OnceLock::new(),
        eig_range: OnceLock::new(),
        dim: basis.dim(),
    })
}

impl MassOp {
    pub fn n(&self) -> usize {
        self.scalar.nrows()
    }

    pub fn scalar_block(&self) -> &DMatrix<f64> {
        &self.scalar
    }

    fn eig_range(&self) -> (f64, f64) {
        *self.eig_range.get_or_init(|| {
            let ev = self.scalar.clone().symmetric_eigenvalues();
            (
                ev.iter().cloned().fold(f64::INFINITY, f64::min),
                ev.iter().cloned().fold(0.0f64, f64::max),
            )
        })
    }

    pub fn min_eig(&self) -> f64 {
        self.eig_range().0
    }

    pub fn max_eig(&self) -> f64 {
        self.eig_range().1
    }

    /// Operator norm of the inverse in the orthonormal basis.
    pub fn inv_op_norm(&self) -> f64 {
        1.0 / self.min_eig()
    }

    fn apply_block(&self, mat: &DMatrix<f64>, v: &CoeffVec) -> CoeffVec {
        let n = self.n();
        let mut out = CoeffVec::zeros(n, v.dim());
        for c in 0..v.dim() {
            let x = nalgebra::DVector::from_column_slice(v.comp(c));
            let y = mat * x;
            out.comp_mut(c).copy_from_slice(y.as_slice());
        }
        out
    }

    /// `M v` (momentum from velocity).
    pub fn apply(&self, v: &CoeffVec) -> CoeffVec {
        self.apply_block(&self.scalar, v)
    }

    /// `M^{-1} v` (velocity from momentum).
    pub fn solve(&self, v: &CoeffVec) -> CoeffVec {
        let n = self.n();
        let mut out = CoeffVec::zeros(n, v.dim());
        for c in 0..v.dim() {
            let x = nalgebra::DVector::from_column_slice(v.comp(c));
            let y = self.chol.solve(&x);
            out.comp_mut(c).copy_from_slice(y.as_slice());
        }
        out
    }

    /// `M^{1/2} v` through the symmetric PSD square root
    /// (eigendecomposition, cached after the first call).
    pub fn apply_sqrt(&self, v: &CoeffVec) -> CoeffVec {
        let sqrt = self.sqrt.get_or_init(|| {
            let eig = self.scalar.clone().symmetric_eigen();
            let mut d = eig.eigenvalues.clone();
            for v in d.iter_mut() {
                *v = v.max(0.0).sqrt();
            }
            let q = &eig.eigenvectors;
            q * DMatrix::from_diagonal(&d) * q.transpose()
        });
        self.apply_block(sqrt, v)
    }

    /// `<v, M v> = int rho |v|^2`.
    pub fn quadratic(&self, v: &CoeffVec) -> f64 {
        self.apply(v).dot(v)
    }

    /// `<v, M^{-1} v>`.
    pub fn inv_quadratic(&self, v: &CoeffVec) -> f64 {
        self.solve(v).dot(v)
    }

    /// Dense inverse of the scalar block (diagnostics only).
    pub fn inverse_block(&self) -> &DMatrix<f64> {
        self.inv.get_or_init(|| self.chol.inverse())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Operator-norm distance of the inverses against the L1 distance of the
/// densities. Both densities must be bounded below by `eta > 0`.
pub fn mass_lipschitz_check(
    rho1: &DensityField,
    rho2: &DensityField,
    basis: &Basis,
    eta: f64,
) -> Result<(f64, f64)> {
    if rho1.min() < eta || rho2.min() < eta {
        return Err(Error::Config(format!(
            "densities must stay above eta = {eta}, got mins {} and {}",
            rho1.min(),
            rho2.min()
        )));
    }
    let m1 = mass_op(rho1, basis)?;
    let m2 = mass_op(rho2, basis)?;
    let diff = m1.inverse_block() - m2.inverse_block();
    let lhs = diff
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let l1: f64 = basis.domain().cell_volume()
        * rho1
            .values()
            .iter()
            .zip(rho2.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    Ok((lhs, l1))
}

/// Velocity-norm cut-off: a quintic smoothstep that is exactly 1 for
/// arguments at or below `n_cutoff` and exactly 0 at or above
/// `n_cutoff + 1`, monotone nonincreasing, with derivative bounded by 2.
pub fn cutoff_theta(norm: f64, n_cutoff: f64) -> f64 {
    let t = norm - n_cutoff;
    if t <= 0.0 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        1.0 - t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    }
}

/// Cut-off evaluated on the larger of the two grid W(1,inf) norms.
pub fn cutoff_theta_state(u: &CoeffVec, b: &CoeffVec, n_cutoff: f64, basis: &Basis) -> Result<f64> {
    let nu = basis.w1inf_norm(u)?;
    let nb = basis.w1inf_norm(b)?;
    Ok(cutoff_theta(nu.max(nb), n_cutoff))
}

/// Pointwise density powers `rho^gamma` and `rho^beta`, computed once per
/// state and shared by the pressure assembly, the energy ledger, and the
/// noise evaluation.
#[derive(Debug, Clone)]
pub struct DensityPowers {
    pub rg: Vec<f64>,
    pub rb: Vec<f64>,
}

impl DensityPowers {
    pub fn new(rho: &DensityField, params: &SimParams) -> Self {
        let rg = rho.values().iter().map(|r| r.powf(params.gamma)).collect();
        let rb = rho.values().iter().map(|r| r.powf(params.beta)).collect();
        Self { rg, rb }
    }
}

/// Grid samples shared by the drift assembly, the cut-off, and the
/// diagnostics for one state.
#[derive(Debug, Clone)]
pub struct GridState {
    /// Velocity components on the grid.
    pub u_vals: Vec<Vec<f64>>,
    /// Velocity partials, layout `[c * dim + a]`.
    pub u_grad: Vec<Vec<f64>>,
    pub u_div: Vec<f64>,
    pub b_vals: Vec<Vec<f64>>,
    pub b_grad: Vec<Vec<f64>>,
    /// Curl of B: one scalar field in 2-d, three components in 3-d.
    pub b_curl: Vec<Vec<f64>>,
    /// Gradient of the grid density (cosine interpolant), for the
    /// artificial-viscosity drift term; empty when not requested.
    pub rho_grad: Vec<Vec<f64>>,
    pub w1inf_u: f64,
    pub w1inf_b: f64,
}

impl GridState {
    pub fn new(
        rho: Option<&DensityField>,
        u: &CoeffVec,
        b: &CoeffVec,
        basis: &Basis,
    ) -> Result<Self> {
        let dim = basis.dim();
        let nc = basis.domain().n_cells();
        let n = basis.n();
        // One batched multiply per evaluation matrix: columns of `coeffs`
        // are the field components.
        let mut coeffs = DMatrix::<f64>::zeros(n, 2 * dim);
        for c in 0..dim {
            coeffs.column_mut(c).copy_from_slice(u.comp(c));
            coeffs.column_mut(dim + c).copy_from_slice(b.comp(c));
        }
        let vals = basis.phi_matrix() * &coeffs;
        let col = |m: &DMatrix<f64>, j: usize| m.column(j).as_slice().to_vec();
        let u_vals: Vec<Vec<f64>> = (0..dim).map(|c| col(&vals, c)).collect();
        let b_vals: Vec<Vec<f64>> = (0..dim).map(|c| col(&vals, dim + c)).collect();
        let grads: Vec<DMatrix<f64>> = (0..dim)
            .map(|a| basis.dphi_matrix(a) * &coeffs)
            .collect();
        let mut u_grad = Vec::with_capacity(dim * dim);
        let mut b_grad = Vec::with_capacity(dim * dim);
        for c in 0..dim {
            for a in 0..dim {
                u_grad.push(col(&grads[a], c));
            }
        }
        for c in 0..dim {
            for a in 0..dim {
                b_grad.push(col(&grads[a], dim + c));
            }
        }
        let mut u_div = vec![0.0; nc];
        for c in 0..dim {
            for (o, g) in u_div.iter_mut().zip(&u_grad[c * dim + c]) {
                *o += g;
            }
        }
        let b_curl = curl_from_grad(&b_grad, dim, nc);
        let rho_grad = match rho {
            Some(r) => basis.grid_gradient(r.values())?,
            None => Vec::new(),
        };
        let sup = |fields: &[Vec<f64>]| -> f64 {
            fields
                .iter()
                .flat_map(|f| f.iter())
                .fold(0.0f64, |m, &v| m.max(v.abs()))
        };
        let w1inf_u = sup(&u_vals).max(sup(&u_grad));
        let w1inf_b = sup(&b_vals).max(sup(&b_grad));
        Ok(Self {
            u_vals,
            u_grad,
            u_div,
            b_vals,
            b_grad,
            b_curl,
            rho_grad,
            w1inf_u,
            w1inf_b,
        })
    }
}

fn curl_from_grad(grad: &[Vec<f64>], dim: usize, nc: usize) -> Vec<Vec<f64>> {
    if dim == 2 {
        let mut w = vec![0.0; nc];
        for c in 0..nc {
            w[c] = grad[2][c] - grad[1][c];
        }
        vec![w]
    } else {
        let mut out = vec![vec![0.0; nc]; 3];
        for c in 0..nc {
            out[0][c] = grad[2 * 3 + 1][c] - grad[3 + 2][c];
            out[1][c] = grad[2][c] - grad[2 * 3][c];
            out[2][c] = grad[3][c] - grad[1][c];
        }
        out
    }
}

/// `(curl B) x B` on the grid (the 2-d case uses the in-plane reduction
/// with the scalar curl).
pub fn lorentz_force(state: &GridState, dim: usize, nc: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; nc]; dim];
    if dim == 2 {
        let w = &state.b_curl[0];
        for c in 0..nc {
            out[0][c] = -w[c] * state.b_vals[1][c];
            out[1][c] = w[c] * state.b_vals[0][c];
        }
    } else {
        for c in 0..nc {
            let j = [state.b_curl[0][c], state.b_curl[1][c], state.b_curl[2][c]];
            let b = [state.b_vals[0][c], state.b_vals[1][c], state.b_vals[2][c]];
            out[0][c] = j[1] * b[2] - j[2] * b[1];
            out[1][c] = j[2] * b[0] - j[0] * b[2];
            out[2][c] = j[0] * b[1] - j[1] * b[0];
        }
    }
    out
}

/// `u x B` on the grid: a scalar (z-component) in 2-d, a vector in 3-d.
fn velocity_cross_b(state: &GridState, dim: usize, nc: usize) -> Vec<Vec<f64>> {
    if dim == 2 {
        let mut s = vec![0.0; nc];
        for c in 0..nc {
            s[c] =
                state.u_vals[0][c] * state.b_vals[1][c] - state.u_vals[1][c] * state.b_vals[0][c];
        }
        vec![s]
    } else {
        let mut out = vec![vec![0.0; nc]; 3];
        for c in 0..nc {
            let u = [state.u_vals[0][c], state.u_vals[1][c], state.u_vals[2][c]];
            let b = [state.b_vals[0][c], state.b_vals[1][c], state.b_vals[2][c]];
            out[0][c] = u[1] * b[2] - u[2] * b[1];
            out[1][c] = u[2] * b[0] - u[0] * b[2];
            out[2][c] = u[0] * b[1] - u[1] * b[0];
        }
        out
    }
}

/// The additive pieces of the momentum drift, kept separate so energy
/// pairings can be tested term by term.
#[derive(Debug, Clone)]
pub struct MomentumParts {
    /// `mu Lap(u) + (lambda + mu) grad(div u)` projected.
    pub viscous: CoeffVec,
    /// `-grad(a rho^gamma + delta rho^beta)` projected (weak form).
    pub pressure: CoeffVec,
    /// `-div(rho u (x) u)` projected (weak form).
    pub convection: CoeffVec,
    /// `-eps grad(u) . grad(rho)` projected.
    pub eps_term: CoeffVec,
    /// `(curl B) x B` projected.
    pub lorentz: CoeffVec,
}

impl MomentumParts {
    pub fn total(&self) -> CoeffVec {
        let mut out = self.viscous.clone();
        out.axpy(1.0, &self.pressure);
        out.axpy(1.0, &self.convection);
        out.axpy(1.0, &self.eps_term);
        out.axpy(1.0, &self.lorentz);
        out
    }
}

/// Assemble the momentum drift from precomputed grid samples.
pub fn momentum_rhs_parts(
    rho: &DensityField,
    state: &GridState,
    u: &CoeffVec,
    params: &SimParams,
    basis: &Basis,
) -> Result<MomentumParts> {
    let powers = DensityPowers::new(rho, params);
    momentum_rhs_parts_cached(rho, &powers, state, u, params, basis)
}

/// As [`momentum_rhs_parts`], reusing precomputed density powers.
pub fn momentum_rhs_parts_cached(
    rho: &DensityField,
    powers: &DensityPowers,
    state: &GridState,
    u: &CoeffVec,
    params: &SimParams,
    basis: &Basis,
) -> Result<MomentumParts> {
    let dim = basis.dim();
    let n = basis.n();
    let nc = basis.domain().n_cells();

    // Viscous: mu * Lap is diagonal; the grad-div part pairs div u against
    // d phi_j / d x_c with a minus sign from integration by parts.
    let mut viscous = basis.apply_laplacian(u);
    viscous.scale(params.mu);
    let lm = params.lambda + params.mu;
    if lm != 0.0 {
        for c in 0..dim {
            let inner = basis.inner_dphi(&state.u_div, c);
            for (k, v) in inner.iter().enumerate() {
                let cur = viscous.get(c, k);
                viscous.set(c, k, cur - lm * v);
            }
        }
    }

    // Pressure: <-grad P, phi_j e_c> = +<P, d phi_j / d x_c>.
    let mut pgrid = vec![0.0; nc];
    for (p, (g, b)) in pgrid.iter_mut().zip(powers.rg.iter().zip(&powers.rb)) {
        *p = params.a * g + params.delta * b;
    }
    let mut pressure = CoeffVec::zeros(n, dim);
    for c in 0..dim {
        let inner = basis.inner_dphi(&pgrid, c);
        pressure.comp_mut(c).copy_from_slice(&inner);
    }

    // Convection: <-div(rho u (x) u), phi_j e_c> = sum_a <rho u_a u_c, d_a phi_j>.
    let mut convection = CoeffVec::zeros(n, dim);
    let mut prod = vec![0.0; nc];
    for c in 0..dim {
        for a in 0..dim {
            for i in 0..nc {
                prod[i] = rho.values()[i] * state.u_vals[a][i] * state.u_vals[c][i];
            }
            let inner = basis.inner_dphi(&prod, a);
            for (k, v) in inner.iter().enumerate() {
                let cur = convection.get(c, k);
                convection.set(c, k, cur + v);
            }
        }
    }

    // Artificial-viscosity coupling: -eps (grad u . grad rho)_c.
    let mut eps_term = CoeffVec::zeros(n, dim);
    if params.eps > 0.0 {
        for c in 0..dim {
            for i in 0..nc {
                let mut s = 0.0;
                for a in 0..dim {
                    s += state.u_grad[c * dim + a][i] * state.rho_grad[a][i];
                }
                prod[i] = -params.eps * s;
            }
            let proj = basis.project(&prod)?;
            eps_term.comp_mut(c).copy_from_slice(&proj);
        }
    }

    // Lorentz force, strong form with the spectral curl.
    let lf = lorentz_force(state, dim, nc);
    let mut lorentz = CoeffVec::zeros(n, dim);
    for c in 0..dim {
        let proj = basis.project(&lf[c])?;
        lorentz.comp_mut(c).copy_from_slice(&proj);
    }

    Ok(MomentumParts {
        viscous,
        pressure,
        convection,
        eps_term,
        lorentz,
    })
}

/// Momentum drift `N1[rho, u, B]` as a single coefficient vector.
pub fn momentum_rhs(
    rho: &DensityField,
    u: &CoeffVec,
    b: &CoeffVec,
    params: &SimParams,
    basis: &Basis,
) -> Result<CoeffVec> {
    let state = GridState::new(
        if params.eps > 0.0 { Some(rho) } else { None },
        u,
        b,
        basis,
    )?;
    Ok(momentum_rhs_parts(rho, &state, u, params, basis)?.total())
}

/// Induction drift `N2[u, B]`: advection in the curl-paired weak form plus
/// diagonal magnetic diffusion.
pub fn induction_rhs_state(
    state: &GridState,
    b: &CoeffVec,
    params: &SimParams,
    basis: &Basis,
) -> Result<CoeffVec> {
    let dim = basis.dim();
    let nc = basis.domain().n_cells();
    let cross = velocity_cross_b(state, dim, nc);

    let mut out = basis.apply_laplacian(b);
    out.scale(params.nu);

    if dim == 2 {
        // <curl(s e_z), phi_j e_x> = -<s, d phi_j / dy>, and +<s, d phi_j / dx>
        // for the y component.
        let s = &cross[0];
        let ix = basis.inner_dphi(s, 1);
        let iy = basis.inner_dphi(s, 0);
        for (k, v) in ix.iter().enumerate() {
            let cur = out.get(0, k);
            out.set(0, k, cur - v);
        }
        for (k, v) in iy.iter().enumerate() {
            let cur = out.get(1, k);
            out.set(1, k, cur + v);
        }
    } else {
        // <w, curl(phi_j e_c)> with curl(phi e_x) = (0, d_z phi, -d_y phi), etc.
        let pairs = [
            [(1usize, 2usize), (2, 1)],
            [(2, 0), (0, 2)],
            [(0, 1), (1, 0)],
        ];
        for (c, pair) in pairs.iter().enumerate() {
            let (wp, ap) = pair[0];
            let (wm, am) = pair[1];
            let plus = basis.inner_dphi(&cross[wp], ap);
            let minus = basis.inner_dphi(&cross[wm], am);
            for k in 0..basis.n() {
                let cur = out.get(c, k);
                out.set(c, k, cur + plus[k] - minus[k]);
            }
        }
    }
    Ok(out)
}

/// Induction drift from raw coefficient inputs.
pub fn induction_rhs(
    u: &CoeffVec,
    b: &CoeffVec,
    params: &SimParams,
    basis: &Basis,
) -> Result<CoeffVec> {
    let state = GridState::new(None, u, b, basis)?;
    induction_rhs_state(&state, b, params, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Domain;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> Basis {
        let dom = Domain::new(&[std::f64::consts::PI, std::f64::consts::PI], &[32, 32]).unwrap();
        Basis::new(dom, 3).unwrap()
    }

    fn uniform(basis: &Basis, c: f64) -> DensityField {
        DensityField::new(vec![c; basis.domain().n_cells()], basis).unwrap()
    }

    fn random_coeffs(basis: &Basis, seed: u64, amp: f64) -> CoeffVec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = CoeffVec::zeros(basis.n(), basis.dim());
        for v in u.data_mut() {
            *v = amp * (rng.random::<f64>() - 0.5);
        }
        u
    }

    fn random_density(basis: &Basis, seed: u64, base: f64, amp: f64) -> DensityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dom = basis.domain();
        let m1: f64 = 1.0 + (rng.random::<f64>() * 2.0).floor();
        let m2: f64 = 1.0 + (rng.random::<f64>() * 2.0).floor();
        let vals: Vec<f64> = (0..dom.n_cells())
            .map(|c| {
                let x = dom.cell_center(c);
                base + amp * (m1 * x[0]).cos() * (m2 * x[1]).cos()
            })
            .collect();
        DensityField::new(vals, basis).unwrap()
    }

    #[test]
    fn params_validation_names_the_invariant() {
        let p = SimParams {
            gamma: 1.2,
            ..SimParams::default()
        };
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("gamma must exceed 3/2"), "{msg}");
        let p = SimParams {
            gamma: 2.0,
            beta: 3.0,
            ..SimParams::default()
        };
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("beta must exceed max{4, gamma}"), "{msg}");
        assert!(SimParams::default().validate().is_ok());
    }

    #[test]
    fn mass_op_of_unit_density_is_identity() {
        let basis = setup();
        let m = mass_op(&uniform(&basis, 1.0), &basis).unwrap();
        for i in 0..basis.n() {
            for j in 0..basis.n() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m.scalar_block()[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mass_op_of_constant_density_scales_identity() {
        let basis = setup();
        let c = 2.7;
        let m = mass_op(&uniform(&basis, c), &basis).unwrap();
        let v = random_coeffs(&basis, 1, 1.0);
        let mv = m.apply(&v);
        let sv = m.apply_sqrt(&v);
        for k in 0..v.data().len() {
            assert!((mv.data()[k] - c * v.data()[k]).abs() < 1e-12);
            assert!((sv.data()[k] - c.sqrt() * v.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_norm_bounded_by_inf_density() {
        let basis = setup();
        for seed in 0..5 {
            let rho = random_density(&basis, seed, 1.0, 0.6);
            let m = mass_op(&rho, &basis).unwrap();
            let bound = 1.0 / rho.min() / (1.0 - 1e-8);
            assert!(
                m.inv_op_norm() <= bound,
                "||M^-1|| = {} exceeds {bound}",
                m.inv_op_norm()
            );
            assert!(m.min_eig() >= rho.min() - 1e-10);
        }
    }

    #[test]
    fn mass_op_rejects_nonpositive_density() {
        let basis = setup();
        let rho = uniform(&basis, 0.0);
        assert!(matches!(
            mass_op(&rho, &basis),
            Err(Error::NonPositiveDensity { .. })
        ));
    }

    #[test]
    fn mass_monotone_in_density() {
        let basis = setup();
        let r1 = random_density(&basis, 3, 1.0, 0.4);
        let dom = basis.domain();
        let vals2: Vec<f64> = (0..dom.n_cells())
            .map(|c| {
                let x = dom.cell_center(c);
                r1.values()[c] + 0.3 * (1.0 + (2.0 * x[0]).cos() * x[1].cos()).max(0.0)
            })
            .collect();
        let r2 = DensityField::new(vals2, &basis).unwrap();
        let m1 = mass_op(&r1, &basis).unwrap();
        let m2 = mass_op(&r2, &basis).unwrap();
        let diff = m2.scalar_block() - m1.scalar_block();
        let min_eig = diff
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-10, "difference not PSD: min eig {min_eig}");
    }

    #[test]
    fn solve_and_sqrt_are_consistent() {
        let basis = setup();
        let rho = random_density(&basis, 9, 1.0, 0.5);
        let m = mass_op(&rho, &basis).unwrap();
        let v = random_coeffs(&basis, 2, 1.0);
        // M^{-1} M v = v
        let back = m.solve(&m.apply(&v));
        for (a, b) in back.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        // M^{1/2} M^{1/2} v = M v
        let twice = m.apply_sqrt(&m.apply_sqrt(&v));
        let direct = m.apply(&v);
        for (a, b) in twice.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn lipschitz_check_zero_for_equal_densities() {
        let basis = setup();
        let rho = random_density(&basis, 5, 1.0, 0.4);
        let (lhs, rhs) = mass_lipschitz_check(&rho, &rho, &basis, 0.1).unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
    }

    #[test]
    fn lipschitz_ratio_stays_bounded_as_perturbation_shrinks() {
        let basis = setup();
        let rho1 = random_density(&basis, 5, 1.0, 0.3);
        let dom = basis.domain().clone();
        let mut ratios = Vec::new();
        for &eta in &[1e-1, 1e-2, 1e-3] {
            let vals: Vec<f64> = (0..dom.n_cells())
                .map(|c| {
                    let x = dom.cell_center(c);
                    rho1.values()[c] + eta * x[0].cos() * x[1].cos()
                })
                .collect();
            let rho2 = DensityField::new(vals, &basis).unwrap();
            let (lhs, rhs) = mass_lipschitz_check(&rho1, &rho2, &basis, 0.1).unwrap();
            ratios.push(lhs / rhs);
        }
        let d1 = (ratios[1] - ratios[0]).abs();
        let d2 = (ratios[2] - ratios[1]).abs();
        assert!(d2 <= d1 + 1e-9, "ratios not settling: {ratios:?}");
    }

    #[test]
    fn inverse_scales_reciprocally_with_density() {
        let basis = setup();
        let rho = random_density(&basis, 7, 1.0, 0.4);
        let vals2: Vec<f64> = rho.values().iter().map(|v| 2.0 * v).collect();
        let rho2 = DensityField::new(vals2, &basis).unwrap();
        let m1 = mass_op(&rho, &basis).unwrap();
        let m2 = mass_op(&rho2, &basis).unwrap();
        let i1 = m1.inverse_block();
        let i2 = m2.inverse_block();
        for i in 0..basis.n() {
            for j in 0..basis.n() {
                assert!((i2[(i, j)] - 0.5 * i1[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_rhs_vanishes_for_constant_pressure_equilibrium() {
        let basis = setup();
        let params = SimParams::default();
        let rho = uniform(&basis, 1.3);
        let u = CoeffVec::zeros(basis.n(), 2);
        let b = CoeffVec::zeros(basis.n(), 2);
        let rhs = momentum_rhs(&rho, &u, &b, &params, &basis).unwrap();
        for &v in rhs.data() {
            assert!(v.abs() < 1e-12, "equilibrium drift {v}");
        }
    }

    #[test]
    fn pressure_term_linearizes_correctly() {
        // rho = c + eta * phi_(1,1): the pressure term matches the weak
        // pairing of the symbolic linearization
        // P ~ a c^gamma + a gamma c^(gamma-1) eta phi, with quadratic error
        // in eta. The oracle is a self-contained quadrature built from raw
        // trig products.
        let basis = setup();
        let params = SimParams {
            delta: 0.0,
            eps: 0.0,
            ..SimParams::default()
        };
        let c0 = 1.2;
        let k = basis.mode_position(&[1, 1]).unwrap();
        let u = CoeffVec::zeros(basis.n(), 2);
        let b = CoeffVec::zeros(basis.n(), 2);
        let dom = basis.domain().clone();
        let norm = 2.0 / std::f64::consts::PI;
        let w = dom.cell_volume();
        let mut errs = Vec::new();
        for &eta in &[1e-3, 2e-3] {
            let vals: Vec<f64> = (0..dom.n_cells())
                .map(|i| c0 + eta * basis.phi(k, i))
                .collect();
            let rho = DensityField::new(vals, &basis).unwrap();
            let rhs = momentum_rhs(&rho, &u, &b, &params, &basis).unwrap();
            let slope = params.a * params.gamma * c0.powf(params.gamma - 1.0) * eta;
            let mut emax: f64 = 0.0;
            for (j, m) in basis.modes().iter().enumerate() {
                let mj = [m[0] as f64, m[1] as f64];
                let mut want = [0.0f64; 2];
                for cell in 0..dom.n_cells() {
                    let x = dom.cell_center(cell);
                    let lin = slope * norm * x[0].sin() * x[1].sin();
                    let dpx = norm * mj[0] * (mj[0] * x[0]).cos() * (mj[1] * x[1]).sin();
                    let dpy = norm * mj[1] * (mj[0] * x[0]).sin() * (mj[1] * x[1]).cos();
                    want[0] += w * lin * dpx;
                    want[1] += w * lin * dpy;
                }
                for c in 0..2 {
                    emax = emax.max((rhs.get(c, j) - want[c]).abs());
                }
            }
            errs.push(emax);
        }
        let rate = errs[1] / errs[0];
        assert!(
            (rate - 4.0).abs() < 0.8,
            "expected quadratic defect, got rate {rate} ({errs:?})"
        );
        assert!(errs[0] < 1e-6, "linearization defect {errs:?}");
    }

    #[test]
    fn lorentz_matches_direct_quadrature() {
        // B = phi_(1,1) e_x, u = 0, rho = 1, d = 2: compare against a
        // self-contained quadrature of ((curl B) x B) . phi_j built from raw
        // sine products.
        let basis = setup();
        let params = SimParams::default();
        let rho = uniform(&basis, 1.0);
        let k = basis.mode_position(&[1, 1]).unwrap();
        let u = CoeffVec::zeros(basis.n(), 2);
        let mut b = CoeffVec::zeros(basis.n(), 2);
        b.set(0, k, 1.0);
        let state = GridState::new(Some(&rho), &u, &b, &basis).unwrap();
        let parts = momentum_rhs_parts(&rho, &state, &u, &params, &basis).unwrap();
        let dom = basis.domain();
        let norm = 2.0 / std::f64::consts::PI;
        let w = dom.cell_volume();
        for (j, m) in basis.modes().iter().enumerate() {
            let mut want = [0.0f64; 2];
            for cell in 0..dom.n_cells() {
                let x = dom.cell_center(cell);
                // B = norm sin(x) sin(y) e_x; curl = -dB_x/dy = -norm sin(x) cos(y).
                let omega = -norm * x[0].sin() * x[1].cos();
                let bx = norm * x[0].sin() * x[1].sin();
                // (omega e_z) x B = omega (-B_y, B_x) = (0, omega * bx).
                let phij = norm * (m[0] as f64 * x[0]).sin() * (m[1] as f64 * x[1]).sin();
                want[1] += w * omega * bx * phij;
            }
            assert!((parts.lorentz.get(0, j) - want[0]).abs() < 1e-10);
            assert!((parts.lorentz.get(1, j) - want[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn induction_pure_diffusion_is_diagonal() {
        let basis = setup();
        let params = SimParams::default();
        let u = CoeffVec::zeros(basis.n(), 2);
        let b = random_coeffs(&basis, 4, 1.0);
        let rhs = induction_rhs(&u, &b, &params, &basis).unwrap();
        for c in 0..2 {
            for k in 0..basis.n() {
                let want = -params.nu * basis.eigvals()[k] * b.get(c, k);
                assert!((rhs.get(c, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn induction_vanishes_for_zero_b() {
        let basis = setup();
        let params = SimParams::default();
        let u = random_coeffs(&basis, 8, 1.0);
        let b = CoeffVec::zeros(basis.n(), 2);
        let rhs = induction_rhs(&u, &b, &params, &basis).unwrap();
        assert!(rhs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn induction_advection_pairing_matches_quadrature() {
        // <curl(u x B), B> computed from mode coefficients equals the grid
        // quadrature of (u x B) . curl B.
        let basis = setup();
        let params = SimParams {
            nu: 1e-300, // isolate advection (nu must stay positive)
            ..SimParams::default()
        };
        let u = random_coeffs(&basis, 21, 0.8);
        let b = random_coeffs(&basis, 22, 0.8);
        let rhs = induction_rhs(&u, &b, &params, &basis).unwrap();
        let lhs = rhs.dot(&b);
        let state = GridState::new(None, &u, &b, &basis).unwrap();
        let nc = basis.domain().n_cells();
        let cross = velocity_cross_b(&state, 2, nc);
        let want = basis.domain().cell_volume()
            * cross[0]
                .iter()
                .zip(&state.b_curl[0])
                .map(|(s, w)| s * w)
                .sum::<f64>();
        assert!((lhs - want).abs() < 1e-10, "{lhs} vs {want}");
    }

    #[test]
    fn lorentz_and_induction_work_cancel() {
        // The energy transfer between the momentum and induction equations
        // cancels to rounding: <(curl B) x B, u> + <curl(u x B), B> = 0.
        for dim in [2usize, 3] {
            let basis = if dim == 2 {
                setup()
            } else {
                let dom = Domain::new(&[std::f64::consts::PI; 3], &[8, 8, 8]).unwrap();
                Basis::new(dom, 2).unwrap()
            };
            let params = SimParams {
                nu: 1e-300,
                ..SimParams::default()
            };
            let u = random_coeffs(&basis, 31, 0.7);
            let b = random_coeffs(&basis, 32, 0.7);
            let rho = uniform(&basis, 1.0);
            let state = GridState::new(Some(&rho), &u, &b, &basis).unwrap();
            let parts = momentum_rhs_parts(&rho, &state, &u, &params, &basis).unwrap();
            let diffusion = {
                let mut d = basis.apply_laplacian(&b);
                d.scale(params.nu);
                d
            };
            let mut ind = induction_rhs_state(&state, &b, &params, &basis).unwrap();
            ind.axpy(-1.0, &diffusion);
            let transfer = parts.lorentz.dot(&u) + ind.dot(&b);
            assert!(transfer.abs() < 1e-10, "dim {dim}: net transfer {transfer}");
        }
    }

    #[test]
    fn viscous_energy_pairing_is_exact() {
        let basis = setup();
        let params = SimParams {
            lambda: 0.3,
            ..SimParams::default()
        };
        let rho = uniform(&basis, 1.0);
        let u = random_coeffs(&basis, 13, 1.0);
        let b = CoeffVec::zeros(basis.n(), 2);
        let state = GridState::new(Some(&rho), &u, &b, &basis).unwrap();
        let parts = momentum_rhs_parts(&rho, &state, &u, &params, &basis).unwrap();
        let got = parts.viscous.dot(&u);
        let div_l2 = basis.grid_l2(&state.u_div);
        let want = -params.mu * basis.grad_l2_norm(&u).powi(2)
            - (params.lambda + params.mu) * div_l2 * div_l2;
        assert!(
            (got - want).abs() <= 1e-8 * want.abs(),
            "pairing {got} vs {want}"
        );
    }

    #[test]
    fn cutoff_endpoint_and_shape() {
        let n = 3.0;
        assert_eq!(cutoff_theta(0.0, n), 1.0);
        assert_eq!(cutoff_theta(n, n), 1.0);
        assert_eq!(cutoff_theta(n + 1.0, n), 0.0);
        assert_eq!(cutoff_theta(n + 5.0, n), 0.0);
        // Monotone nonincreasing, derivative bounded by 2, C1 at the seams.
        let mut prev = 1.0;
        let h = 1e-4;
        let mut x = 0.0;
        while x < n + 2.0 {
            let v = cutoff_theta(x, n);
            assert!(v <= prev + 1e-12);
            let d = (cutoff_theta(x + h, n) - v) / h;
            assert!(d.abs() <= 2.0 + 1e-6, "slope {d} at {x}");
            prev = v;
            x += 0.01;
        }
        let d_at = |x: f64| (cutoff_theta(x + h, n) - cutoff_theta(x - h, n)) / (2.0 * h);
        assert!(d_at(n).abs() < 1e-3);
        assert!(d_at(n + 1.0).abs() < 1e-3);
    }

    #[test]
    fn cutoff_state_zero_fields() {
        let basis = setup();
        let z = CoeffVec::zeros(basis.n(), 2);
        assert_eq!(cutoff_theta_state(&z, &z, 5.0, &basis).unwrap(), 1.0);
    }
}
