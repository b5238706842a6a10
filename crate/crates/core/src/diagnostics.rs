//! Executable analogs of the solver's a-priori structure: the discrete
//! energy budget with Ito corrections, martingale and quadratic-variation
//! statistics, a right inverse of the divergence with zero boundary trace,
//! raised-exponent pressure moments, the effective viscous flux, weak-form
//! renormalized-continuity residuals, and the solenoidal projector.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::{Basis, CoeffVec};
use crate::error::{Error, Result};
use crate::galerkin::SimParams;
use crate::stepper::{MartingaleTracker, Trajectory};
use crate::transport::DensityField;

// ---------------------------------------------------------------------------
// Energy budget
// ---------------------------------------------------------------------------

/// Cumulative energy ledger of one path and the budget residual
/// `E(t) + D(t) + A(t) - E(0) - I(t) - Mart(t)`.
///
/// `I` is the realized quadratic variation of the noise increments, which is
/// the Ito correction of the discrete system; `ito_bound` accumulates the
/// integrand form `(sum_k |f_k/sqrt(rho)|^2 + sum_k |g_k|^2)/2` whose
/// expectation dominates it.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub t: Vec<f64>,
    pub energy: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub artificial: Vec<f64>,
    pub ito: Vec<f64>,
    pub ito_bound: Vec<f64>,
    pub martingale: Vec<f64>,
    pub residual: Vec<f64>,
}

impl EnergyReport {
    pub fn terminal_residual(&self) -> f64 {
        *self.residual.last().unwrap_or(&0.0)
    }

    pub fn sup_energy(&self) -> f64 {
        self.energy.iter().cloned().fold(0.0, f64::max)
    }

    /// Monotonicity of the cumulative dissipation ledgers.
    pub fn ledgers_nondecreasing(&self) -> bool {
        let mono = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0] - 1e-15);
        mono(&self.dissipation) && mono(&self.artificial) && mono(&self.ito)
    }
}

/// Assemble the energy ledger of one trajectory.
pub fn energy_report(traj: &Trajectory) -> EnergyReport {
    let n = traj.points.len();
    let mut t = Vec::with_capacity(n);
    let mut energy = Vec::with_capacity(n);
    let mut dissipation = Vec::with_capacity(n);
    let mut artificial = Vec::with_capacity(n);
    let mut ito = Vec::with_capacity(n);
    let mut ito_bound = Vec::with_capacity(n);
    let mut martingale = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    let (mut d, mut a, mut i, mut ib, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let e0 = traj.points[0].energy();
    for p in &traj.points {
        d += p.diss_incr;
        a += p.art_incr;
        i += p.ito_incr;
        ib += p.ito_bound_incr;
        m += p.mart_incr;
        t.push(p.t);
        energy.push(p.energy());
        dissipation.push(d);
        artificial.push(a);
        ito.push(i);
        ito_bound.push(ib);
        martingale.push(m);
        residual.push(p.energy() + d + a - e0 - i - m);
    }
    EnergyReport {
        t,
        energy,
        dissipation,
        artificial,
        ito,
        ito_bound,
        martingale,
        residual,
    }
}

// ---------------------------------------------------------------------------
// Martingale statistics
// ---------------------------------------------------------------------------

/// z-scores of the compensated martingale statistics in one test direction.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionScores {
    /// mean of `<M(T), phi>`.
    pub mean_f: f64,
    /// mean of `<M(T), phi>^2 - int sum_k <f_k^n, phi>^2`.
    pub qv_f: f64,
    pub mean_g: f64,
    pub qv_g: f64,
    /// cross-channel covariance `<M, phi><Mg, phi>`.
    pub cross: f64,
}

impl DirectionScores {
    pub fn max_abs(&self) -> f64 {
        [self.mean_f, self.qv_f, self.mean_g, self.qv_g, self.cross]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleZScores {
    pub per_direction: Vec<DirectionScores>,
    pub paths: usize,
}

impl MartingaleZScores {
    pub fn pass(&self, z_max: f64) -> bool {
        self.per_direction.iter().all(|d| d.max_abs() <= z_max)
    }
}

fn z_score(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean: f64 = samples.iter().sum::<f64>() / n;
    let var: f64 = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        // Degenerate sample (e.g. noise off): the statistic is exactly its
        // mean, which must itself be zero to pass.
        return if mean == 0.0 { 0.0 } else { f64::INFINITY };
    }
    mean / (var / n).sqrt()
}

/// Compensated first/second-moment and cross-channel z-scores over an
/// ensemble of per-path martingale ledgers. Needs at least 50 paths.
pub fn martingale_qv_test(trackers: &[&MartingaleTracker]) -> Result<MartingaleZScores> {
    if trackers.len() < 50 {
        return Err(Error::TooFewPaths {
            needed: 50,
            got: trackers.len(),
        });
    }
    let ndir = trackers.first().map(|t| t.m_f.len()).unwrap_or(0);
    let mut per_direction = Vec::with_capacity(ndir);
    for d in 0..ndir {
        let mf: Vec<f64> = trackers.iter().map(|t| t.m_f[d]).collect();
        let mg: Vec<f64> = trackers.iter().map(|t| t.m_g[d]).collect();
        let qf: Vec<f64> = trackers
            .iter()
            .map(|t| t.m_f[d] * t.m_f[d] - t.qv_f[d])
            .collect();
        let qg: Vec<f64> = trackers
            .iter()
            .map(|t| t.m_g[d] * t.m_g[d] - t.qv_g[d])
            .collect();
        let cross: Vec<f64> = trackers.iter().map(|t| t.m_f[d] * t.m_g[d]).collect();
        per_direction.push(DirectionScores {
            mean_f: z_score(&mf),
            qv_f: z_score(&qf),
            mean_g: z_score(&mg),
            qv_g: z_score(&qg),
            cross: z_score(&cross),
        });
    }
    Ok(MartingaleZScores {
        per_direction,
        paths: trackers.len(),
    })
}

// ---------------------------------------------------------------------------
// Cut-off families
// ---------------------------------------------------------------------------

/// Base truncation profile: `T(z) = z` for `z <= 1`, constant 2 for
/// `z >= 3`, and the unique monotone concave quadratic Hermite blend in
/// between (value/slope continuous at both seams).
pub fn t_cut(z: f64) -> f64 {
    if z <= 1.0 {
        z
    } else if z >= 3.0 {
        2.0
    } else {
        let s = 0.5 * (z - 1.0);
        1.0 + 2.0 * s - s * s
    }
}

/// Derivative of [`t_cut`].
pub fn t_cut_deriv(z: f64) -> f64 {
    if z <= 1.0 {
        1.0
    } else if z >= 3.0 {
        0.0
    } else {
        1.0 - 0.5 * (z - 1.0)
    }
}

/// Scaled truncation `T_k(z) = k T(z / k)`.
pub fn t_k(z: f64, k: f64) -> f64 {
    k * t_cut(z / k)
}

pub fn t_k_deriv(z: f64, k: f64) -> f64 {
    t_cut_deriv(z / k)
}

/// Log-weighted family: `L_k(z) = z ln z` below `k` and
/// `z ln k + z int_k^z T_k(s)/s^2 ds` above, affine for `z >= 3k`.
/// Satisfies `L_k'(z) z - L_k(z) = T_k(z)`.
pub fn l_k(z: f64, k: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z < k {
        z * z.ln()
    } else {
        z * k.ln() + z * t_k_tail_integral(z, k)
    }
}

/// `int_k^z T_k(s) / s^2 ds` in closed form (the blend is quadratic).
fn t_k_tail_integral(z: f64, k: f64) -> f64 {
    let anti = |w: f64| -0.25 * w + 1.5 * w.ln() + 0.25 / w;
    let w = (z / k).min(3.0);
    let mut acc = anti(w) - anti(1.0);
    if z > 3.0 * k {
        // Beyond 3k the integrand is 2k / s^2.
        acc += 2.0 * (1.0 / 3.0 - k / z);
    }
    acc
}

pub fn l_k_deriv(z: f64, k: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z < k {
        z.ln() + 1.0
    } else {
        k.ln() + t_k_tail_integral(z, k) + t_k(z, k) / z
    }
}

// ---------------------------------------------------------------------------
// Weak-form test battery
// ---------------------------------------------------------------------------

/// One smooth compactly supported space-time bump
/// `prod_i eta((x_i - c_i)/w_i) * eta((t - ct)/wt)` with the standard
/// mollifier profile `eta(s) = exp(-1/(1 - s^2))` inside `|s| < 1`.
#[derive(Debug, Clone, Copy)]
pub struct SpaceTimeBump {
    pub center: [f64; 3],
    pub width: [f64; 3],
    pub t_center: f64,
    pub t_width: f64,
}

fn mollifier(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (-1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

impl SpaceTimeBump {
    pub fn eval(&self, x: &[f64], dim: usize, t: f64) -> f64 {
        self.eval_space(x, dim) * mollifier((t - self.t_center) / self.t_width)
    }

    pub fn eval_space(&self, x: &[f64], dim: usize) -> f64 {
        let mut v = 1.0;
        for a in 0..dim {
            v *= mollifier((x[a] - self.center[a]) / self.width[a]);
        }
        v
    }
}

/// The fixed battery of 8 bumps used by the weak-form residuals, scaled to
/// the domain extents and the horizon (fractions are fixed constants, so
/// residuals are reproducible).
pub fn test_battery(basis: &Basis, t_final: f64) -> Vec<SpaceTimeBump> {
    let dom = basis.domain();
    let dim = dom.dim();
    let frac: [([f64; 3], [f64; 3], f64, f64); 8] = [
        ([0.50, 0.50, 0.50], [0.40, 0.40, 0.40], 0.50, 0.45),
        ([0.35, 0.60, 0.50], [0.30, 0.35, 0.40], 0.40, 0.35),
        ([0.65, 0.35, 0.45], [0.30, 0.30, 0.35], 0.60, 0.35),
        ([0.50, 0.30, 0.60], [0.45, 0.25, 0.30], 0.55, 0.40),
        ([0.30, 0.30, 0.40], [0.25, 0.25, 0.30], 0.35, 0.30),
        ([0.70, 0.70, 0.60], [0.25, 0.25, 0.30], 0.65, 0.30),
        ([0.45, 0.55, 0.35], [0.35, 0.40, 0.30], 0.45, 0.40),
        ([0.55, 0.45, 0.65], [0.40, 0.30, 0.30], 0.70, 0.25),
    ];
    frac.iter()
        .map(|(c, w, tc, tw)| {
            let mut center = [0.0; 3];
            let mut width = [0.0; 3];
            for a in 0..dim {
                center[a] = c[a] * dom.length(a);
                width[a] = w[a] * dom.length(a);
            }
            SpaceTimeBump {
                center,
                width,
                t_center: tc * t_final,
                t_width: tw * t_final,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Renormalized continuity residual
// ---------------------------------------------------------------------------

/// The composition function `b` of the renormalized continuity equation.
pub trait RenormFn {
    fn b(&self, z: f64) -> f64;
    fn db(&self, z: f64) -> f64;
    fn name(&self) -> &'static str;
}

pub struct IdentityFn;
impl RenormFn for IdentityFn {
    fn b(&self, z: f64) -> f64 {
        z
    }
    fn db(&self, _z: f64) -> f64 {
        1.0
    }
    fn name(&self) -> &'static str {
        "identity"
    }
}

pub struct TkFn(pub f64);
impl RenormFn for TkFn {
    fn b(&self, z: f64) -> f64 {
        t_k(z, self.0)
    }
    fn db(&self, z: f64) -> f64 {
        t_k_deriv(z, self.0)
    }
    fn name(&self) -> &'static str {
        "T_k"
    }
}

pub struct LkFn(pub f64);
impl RenormFn for LkFn {
    fn b(&self, z: f64) -> f64 {
        l_k(z, self.0)
    }
    fn db(&self, z: f64) -> f64 {
        l_k_deriv(z, self.0)
    }
    fn name(&self) -> &'static str {
        "L_k"
    }
}

/// Max over the test battery of the discrete weak-form residual of
/// `d_t b(rho) + div(b(rho) u) + (b'(rho) rho - b(rho)) div u = eps-term`.
///
/// The transport terms reuse the scheme's own face velocities and upwind
/// offsets, so affine `b` telescopes against the realized density update to
/// rounding; for genuinely nonlinear `b` the residual measures the
/// renormalization defect of the scheme. Requires a fully recorded
/// trajectory.
pub fn renorm_residual(
    traj: &Trajectory,
    b_fn: &dyn RenormFn,
    basis: &Basis,
) -> Result<f64> {
    let full = traj
        .full
        .as_ref()
        .ok_or_else(|| Error::Config("renorm_residual needs a fully recorded trajectory".into()))?;
    let dom = basis.domain().clone();
    let dim = dom.dim();
    let nc = dom.n_cells();
    let dt = traj.dt;
    let steps = full.transport.len();
    let t_final = dt * steps as f64;
    let battery = test_battery(basis, t_final);

    // Pre-sample the spatial parts of the battery.
    let mut spatial = vec![vec![0.0; nc]; battery.len()];
    for (bi, bump) in battery.iter().enumerate() {
        for c in 0..nc {
            let x = dom.cell_center(c);
            spatial[bi][c] = bump.eval_space(&x[..dim], dim);
        }
    }

    let mut residuals = vec![0.0f64; battery.len()];
    let mut cell_defect = vec![0.0f64; nc];
    for m in 0..steps {
        let rho = &full.densities[m];
        let rho_next = &full.densities[m + 1];
        let rec = &full.transport[m];

        // Upwind flux divergence of b(rho) and FV divergence of u from the
        // recorded face velocities.
        for c in cell_defect.iter_mut() {
            *c = 0.0;
        }
        for a in 0..dim {
            let na = dom.grid_pts(a);
            let nf = na + 1;
            let inv_h = 1.0 / dom.spacing(a);
            let faces = &rec.face_vel[a];
            let other_axes: Vec<usize> = (0..dim).filter(|&ax| ax != a).collect();
            let rest: usize = other_axes.iter().map(|&ax| dom.grid_pts(ax)).product();
            let mut idx = [0usize; crate::basis::MAX_DIM];
            for r in 0..rest {
                let mut rr = r;
                for &ax in &other_axes {
                    idx[ax] = rr % dom.grid_pts(ax);
                    rr /= dom.grid_pts(ax);
                }
                let mut prev_flux = 0.0;
                let mut prev_vel = 0.0;
                for i in 0..na {
                    idx[a] = i;
                    let c = dom.cell_index(&idx[..dim]);
                    let vf = if i + 1 == na { 0.0 } else { faces[(i + 1) + nf * r] };
                    let flux = if i + 1 == na {
                        0.0
                    } else if vf >= 0.0 {
                        vf * b_fn.b(rho[c])
                    } else {
                        idx[a] = i + 1;
                        let cr = dom.cell_index(&idx[..dim]);
                        idx[a] = i;
                        vf * b_fn.b(rho[cr])
                    };
                    // div_FV(F_b) + (b' rho - b) div_FV(u)
                    let bp = b_fn.db(rho[c]);
                    cell_defect[c] += inv_h
                        * ((flux - prev_flux)
                            + (bp * rho[c] - b_fn.b(rho[c])) * (vf - prev_vel));
                    prev_flux = flux;
                    prev_vel = vf;
                }
            }
        }

        // Time difference, transport terms, and the diffusive correction.
        let w = dom.cell_volume();
        let t_mid = dt * m as f64;
        for (bi, bump) in battery.iter().enumerate() {
            let tv = mollifier((t_mid - bump.t_center) / bump.t_width);
            if tv == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for c in 0..nc {
                let db = b_fn.b(rho_next[c]) - b_fn.b(rho[c]);
                let local = db + dt * (cell_defect[c] - b_fn.db(rho[c]) * rec.diff_rate[c]);
                acc += w * spatial[bi][c] * tv * local;
            }
            residuals[bi] = residuals[bi].max(acc.abs());
        }
    }
    Ok(residuals.iter().cloned().fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// Solenoidal projection
// ---------------------------------------------------------------------------

/// Norm of the Galerkin projection of `div B`.
pub fn div_b_norm(b: &CoeffVec, basis: &Basis) -> Result<f64> {
    let div = basis.divergence(b)?;
    let coeffs = basis.project(&div)?;
    Ok(coeffs.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Least-squares projector onto the subspace of spanned fields whose
/// divergence is orthogonal to every scalar mode (the discretely
/// divergence-free subspace).
#[derive(Debug, Clone)]
pub struct DivFreeProjector {
    mat: DMatrix<f64>,
    /// The constraint map `D`: row j, column (c, k) holds
    /// `<d_c phi_k, phi_j>`.
    dmat: DMatrix<f64>,
}

impl DivFreeProjector {
    pub fn new(basis: &Basis) -> Result<Self> {
        let n = basis.n();
        let dim = basis.dim();
        let nd = n * dim;
        let mut dmat = DMatrix::<f64>::zeros(n, nd);
        for c in 0..dim {
            for k in 0..n {
                let mut unit = CoeffVec::zeros(n, dim);
                unit.set(c, k, 1.0);
                let div = basis.divergence(&unit)?;
                let proj = basis.project(&div)?;
                for j in 0..n {
                    dmat[(j, c * n + k)] = proj[j];
                }
            }
        }
        // P projects onto the null space of D: eigendecompose D^T D and keep
        // the eigenvectors below the rank threshold. Orthonormal vectors
        // make the projector exactly idempotent.
        let dtd = dmat.transpose() * &dmat;
        let eig = dtd.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        let tol = 1e-10 * max_eig.max(1e-300);
        let mut mat = DMatrix::<f64>::zeros(nd, nd);
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam <= tol {
                let v = eig.eigenvectors.column(i);
                mat += v * v.transpose();
            }
        }
        Ok(Self { mat, dmat })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn apply(&self, b: &CoeffVec) -> CoeffVec {
        let x = DVector::from_column_slice(b.data());
        let y = &self.mat * x;
        CoeffVec::from_data(y.as_slice().to_vec(), b.n(), b.dim()).unwrap()
    }

    /// A unit-norm element of the divergence-free subspace (for tests and
    /// synthetic fields): the normalized projection of the given seed.
    pub fn sample_subspace(&self, seed: &CoeffVec) -> Option<CoeffVec> {
        let mut v = self.apply(seed);
        let norm = v.l2_norm();
        if norm < 1e-12 {
            return None;
        }
        v.scale(1.0 / norm);
        Some(v)
    }

    pub fn constraint_map(&self) -> &DMatrix<f64> {
        &self.dmat
    }
}

// ---------------------------------------------------------------------------
// Bogovskii-type divergence solver
// ---------------------------------------------------------------------------

/// Corner compatibility functional: one quarter of the sum of the cosine
/// interpolant's values at the four box corners (equivalently the sum of
/// its even-even cosine coefficients).
///
/// Any continuously differentiable field vanishing on the boundary has zero
/// divergence at the corners, so smooth solutions of `div v = f` require
/// `S(f) = 0`. On a smooth domain there is no such condition; it is the
/// price of the box geometry.
pub fn corner_functional(f: &[f64], basis: &Basis) -> Result<f64> {
    let dom = basis.domain();
    if dom.dim() != 2 {
        return Err(Error::Config(
            "corner functional is defined for planar domains".into(),
        ));
    }
    let (nx, ny) = (dom.grid_pts(0), dom.grid_pts(1));
    if f.len() != nx * ny {
        return Err(Error::ShapeMismatch {
            expected: nx * ny,
            got: f.len(),
        });
    }
    let pi = std::f64::consts::PI;
    let mut s_total = 0.0;
    for m1 in (0..nx).step_by(2) {
        for m2 in (0..ny).step_by(2) {
            if m1 == 0 && m2 == 0 {
                continue;
            }
            let mut s = 0.0;
            for i in 0..nx {
                let cx = (m1 as f64 * pi * (i as f64 + 0.5) / nx as f64).cos();
                for j in 0..ny {
                    let cy = (m2 as f64 * pi * (j as f64 + 0.5) / ny as f64).cos();
                    s += f[dom.cell_index(&[i, j])] * cx * cy;
                }
            }
            let n1 = if m1 == 0 { 1.0 } else { 2.0 };
            let n2 = if m2 == 0 { 1.0 } else { 2.0 };
            s_total += s * n1 * n2 / (nx * ny) as f64;
        }
    }
    Ok(s_total)
}

/// Project mean-zero data onto the corner-compatible class by removing the
/// obstruction along the fixed template `cos(2 pi x / Lx) cos(2 pi y / Ly)`.
/// Returns the compatible field and the removed amplitude.
pub fn corner_compatibilize(f: &[f64], basis: &Basis) -> Result<(Vec<f64>, f64)> {
    let s = corner_functional(f, basis)?;
    let dom = basis.domain();
    let mut out = f.to_vec();
    for (c, v) in out.iter_mut().enumerate() {
        let x = dom.cell_center(c);
        *v -= s
            * (2.0 * std::f64::consts::PI * x[0] / dom.length(0)).cos()
            * (2.0 * std::f64::consts::PI * x[1] / dom.length(1)).cos();
    }
    Ok((out, s))
}

/// Output of [`bogovskii_solve`]: the velocity field on the grid together
/// with its certified residuals and norms.
#[derive(Debug, Clone)]
pub struct BogovskiiSolution {
    /// Solution components on the quadrature grid.
    pub velocity: Vec<Vec<f64>>,
    /// `||div v - f||_2 / ||f||_2`, with the divergence evaluated from the
    /// analytic representation of the solution.
    pub div_residual: f64,
    /// sup |v| over boundary sample points.
    pub boundary_sup: f64,
    pub h1_norm: f64,
    pub source_l2: f64,
}

/// Solve `div v = f`, `v = 0` on the boundary, for mean-zero grid data.
///
/// The solution is a gradient of a zero-flux Poisson solve (in the cosine
/// basis, so its divergence reproduces `f` exactly) plus a divergence-free
/// rotational corrector whose boundary trace cancels the tangential trace
/// of the gradient part; the corrector coefficients come from a
/// least-squares solve over the edge-matching constraints. Planar (2-d)
/// domains only.
///
/// The divergence residual is machine-level for any admissible input. The
/// boundary trace vanishes exactly when `f` lies in the corner-compatible
/// class (`corner_functional(f) = 0`, see [`corner_functional`]); otherwise
/// the unavoidable defect is reported in `boundary_sup`. Use
/// [`corner_compatibilize`] to project data into the compatible class.
pub fn bogovskii_solve(f: &[f64], basis: &Basis) -> Result<BogovskiiSolution> {
    let dom = basis.domain().clone();
    if dom.dim() != 2 {
        return Err(Error::Config(
            "divergence solver is implemented for planar domains".into(),
        ));
    }
    let nc = dom.n_cells();
    if f.len() != nc {
        return Err(Error::ShapeMismatch {
            expected: nc,
            got: f.len(),
        });
    }
    let source_l2 = basis.grid_l2(f);
    let integral = basis.grid_integral(f);
    let l1: f64 = basis.grid_integral(&f.iter().map(|v| v.abs()).collect::<Vec<_>>());
    if integral.abs() > 1e-10 * l1.max(1e-300) {
        return Err(Error::NotMeanZero {
            integral: integral.abs(),
            tol: 1e-10 * l1.max(1e-300),
        });
    }

    let (nx, ny) = (dom.grid_pts(0), dom.grid_pts(1));
    let (lx, ly) = (dom.length(0), dom.length(1));
    let pi = std::f64::consts::PI;

    // Full cosine transform of f (midpoint orthogonality).
    let mut cos_x = vec![0.0; nx * nx];
    let mut sin_x = vec![0.0; nx * nx];
    for m in 0..nx {
        for i in 0..nx {
            let arg = m as f64 * pi * (i as f64 + 0.5) / nx as f64;
            cos_x[m * nx + i] = arg.cos();
            sin_x[m * nx + i] = arg.sin();
        }
    }
    let mut cos_y = vec![0.0; ny * ny];
    let mut sin_y = vec![0.0; ny * ny];
    for m in 0..ny {
        for j in 0..ny {
            let arg = m as f64 * pi * (j as f64 + 0.5) / ny as f64;
            cos_y[m * ny + j] = arg.cos();
            sin_y[m * ny + j] = arg.sin();
        }
    }
    // fhat[m1][m2] with normalization 2/N per axis (m >= 1); the (0,0) mode
    // is the (vanishing) mean.
    let mut half = vec![0.0; nx * ny]; // contract over x first
    for m1 in 0..nx {
        for j in 0..ny {
            let mut s = 0.0;
            for i in 0..nx {
                s += cos_x[m1 * nx + i] * f[dom.cell_index(&[i, j])];
            }
            half[m1 * ny + j] = s * if m1 == 0 { 1.0 } else { 2.0 } / nx as f64;
        }
    }
    let mut fhat = vec![0.0; nx * ny];
    for m1 in 0..nx {
        for m2 in 0..ny {
            let mut s = 0.0;
            for j in 0..ny {
                s += cos_y[m2 * ny + j] * half[m1 * ny + j];
            }
            fhat[m1 * ny + m2] = s * if m2 == 0 { 1.0 } else { 2.0 } / ny as f64;
        }
    }

    // Poisson solve with zero-flux boundary: phi_hat = -f_hat / lambda.
    let mut phihat = vec![0.0; nx * ny];
    for m1 in 0..nx {
        for m2 in 0..ny {
            if m1 == 0 && m2 == 0 {
                continue;
            }
            let lam = (m1 as f64 * pi / lx).powi(2) + (m2 as f64 * pi / ly).powi(2);
            phihat[m1 * ny + m2] = -fhat[m1 * ny + m2] / lam;
        }
    }

    // Edge series of the tangential trace of grad(phi).
    // At x = 0 / x = Lx: v1y(y) = -sum_(m2>=1) w2 sin(w2 y) sum_(m1) (+-1)^(m1) phihat.
    let mut g_x0 = vec![0.0; ny];
    let mut g_xl = vec![0.0; ny];
    for m2 in 1..ny {
        let w2 = m2 as f64 * pi / ly;
        let mut s0 = 0.0;
        let mut sl = 0.0;
        for m1 in 0..nx {
            let v = phihat[m1 * ny + m2];
            s0 += v;
            sl += if m1 % 2 == 0 { v } else { -v };
        }
        g_x0[m2] = -w2 * s0;
        g_xl[m2] = -w2 * sl;
    }
    let mut h_y0 = vec![0.0; nx];
    let mut h_yl = vec![0.0; nx];
    for m1 in 1..nx {
        let w1 = m1 as f64 * pi / lx;
        let mut s0 = 0.0;
        let mut sl = 0.0;
        for m2 in 0..ny {
            let v = phihat[m1 * ny + m2];
            s0 += v;
            sl += if m2 % 2 == 0 { v } else { -v };
        }
        h_y0[m1] = -w1 * s0;
        h_yl[m1] = -w1 * sl;
    }

    // Corrector stream function psi = sum c_(k1,k2) sin(w1 x) sin(w2 y),
    // fixing w = rot(psi) = (-d_y psi, d_x psi) so that w_tan = -v1_tan on
    // all four edges. Constraints per tangential mode:
    //   x-edges: sum_k1 c * (k1 pi / Lx) * (+-1)^(k1+1)... matches -g.
    //   y-edges: sum_k2 c * (k2 pi / Ly) matches +h.
    let k1max = nx - 1;
    let k2max = ny - 1;
    let ncols = k1max * k2max;
    let nrows = 2 * (k2max + k1max);
    let mut a = DMatrix::<f64>::zeros(nrows, ncols);
    let mut rhs = DVector::<f64>::zeros(nrows);
    let col = |k1: usize, k2: usize| (k1 - 1) * k2max + (k2 - 1);
    for k2 in 1..=k2max {
        // d_x psi at x = 0 equals -v1y(0, y).
        for k1 in 1..=k1max {
            a[(2 * (k2 - 1), col(k1, k2))] = k1 as f64 * pi / lx;
            a[(2 * (k2 - 1) + 1, col(k1, k2))] =
                (k1 as f64 * pi / lx) * if k1 % 2 == 0 { 1.0 } else { -1.0 };
        }
        rhs[2 * (k2 - 1)] = -g_x0[k2];
        rhs[2 * (k2 - 1) + 1] = -g_xl[k2];
    }
    let off = 2 * k2max;
    for k1 in 1..=k1max {
        // -d_y psi at y = 0 equals -v1x(x, 0).
        for k2 in 1..=k2max {
            a[(off + 2 * (k1 - 1), col(k1, k2))] = k2 as f64 * pi / ly;
            a[(off + 2 * (k1 - 1) + 1, col(k1, k2))] =
                (k2 as f64 * pi / ly) * if k2 % 2 == 0 { 1.0 } else { -1.0 };
        }
        rhs[off + 2 * (k1 - 1)] = h_y0[k1];
        rhs[off + 2 * (k1 - 1) + 1] = h_yl[k1];
    }
    // Minimum-norm solution of the underdetermined system. The rows carry
    // one exact dependency (the gradient part is curl-free, so its edge
    // data satisfies a circulation identity), so use a rank-revealing
    // pseudo-inverse of A A^T instead of a plain factorization.
    let aat = &a * a.transpose();
    let eig = aat.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let tol = 1e-12 * max_eig.max(1e-300);
    let mut lam = DVector::<f64>::zeros(nrows);
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(i);
            lam += v * (v.dot(&rhs) / ev);
        }
    }
    let c = a.transpose() * lam;

    // Assemble v = grad(phi) + rot(psi) on the grid via tensor contraction.
    // grad(phi): vx = -sum phihat w1 sin(w1 x) cos(w2 y), and symmetrically.
    let mut vx = vec![0.0; nc];
    let mut vy = vec![0.0; nc];
    {
        // Contract over m2 for each m1.
        let mut prof_cos = vec![0.0; nx * ny]; // sum_m2 phihat cos(w2 y)
        let mut prof_sin = vec![0.0; nx * ny]; // sum_m2 phihat w2 sin(w2 y)
        for m1 in 0..nx {
            for j in 0..ny {
                let mut sc = 0.0;
                let mut ss = 0.0;
                for m2 in 0..ny {
                    let v = phihat[m1 * ny + m2];
                    if v != 0.0 {
                        sc += v * cos_y[m2 * ny + j];
                        ss += v * (m2 as f64 * pi / ly) * sin_y[m2 * ny + j];
                    }
                }
                prof_cos[m1 * ny + j] = sc;
                prof_sin[m1 * ny + j] = ss;
            }
        }
        for i in 0..nx {
            for j in 0..ny {
                let cix = dom.cell_index(&[i, j]);
                let mut gx = 0.0;
                let mut gy = 0.0;
                for m1 in 0..nx {
                    let w1 = m1 as f64 * pi / lx;
                    gx -= w1 * sin_x[m1 * nx + i] * prof_cos[m1 * ny + j];
                    gy -= cos_x[m1 * nx + i] * prof_sin[m1 * ny + j];
                }
                vx[cix] = gx;
                vy[cix] = gy;
            }
        }
    }
    {
        // rot(psi): wx = -d_y psi, wy = d_x psi.
        for i in 0..nx {
            for j in 0..ny {
                let cix = dom.cell_index(&[i, j]);
                let mut wx = 0.0;
                let mut wy = 0.0;
                for k1 in 1..=k1max {
                    for k2 in 1..=k2max {
                        let cc = c[col(k1, k2)];
                        if cc == 0.0 {
                            continue;
                        }
                        let w1 = k1 as f64 * pi / lx;
                        let w2 = k2 as f64 * pi / ly;
                        wx -= cc * w2 * sin_x[k1 * nx + i] * cos_y[k2 * ny + j];
                        wy += cc * w1 * cos_x[k1 * nx + i] * sin_y[k2 * ny + j];
                    }
                }
                vx[cix] += wx;
                vy[cix] += wy;
            }
        }
    }

    // Divergence residual from the analytic representation: div v =
    // Lap(phi) + 0, whose cosine reconstruction is compared against f.
    let mut div_err2 = 0.0;
    {
        for i in 0..nx {
            for j in 0..ny {
                let cix = dom.cell_index(&[i, j]);
                let mut dv = 0.0;
                for m1 in 0..nx {
                    for m2 in 0..ny {
                        let v = phihat[m1 * ny + m2];
                        if v == 0.0 {
                            continue;
                        }
                        let lam = (m1 as f64 * pi / lx).powi(2) + (m2 as f64 * pi / ly).powi(2);
                        dv -= v * lam * cos_x[m1 * nx + i] * cos_y[m2 * ny + j];
                    }
                }
                let d = dv - f[cix];
                div_err2 += d * d;
            }
        }
        div_err2 *= dom.cell_volume();
    }
    let div_residual = div_err2.sqrt() / source_l2.max(1e-300);

    // Boundary trace of the assembled solution at edge sample points.
    let mut boundary_sup = 0.0f64;
    {
        let eval_at = |x: f64, y: f64| -> (f64, f64) {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for m1 in 0..nx {
                let w1 = m1 as f64 * pi / lx;
                let cx = (w1 * x).cos();
                let sx = (w1 * x).sin();
                for m2 in 0..ny {
                    let v = phihat[m1 * ny + m2];
                    if v == 0.0 {
                        continue;
                    }
                    let w2 = m2 as f64 * pi / ly;
                    gx -= v * w1 * sx * (w2 * y).cos();
                    gy -= v * w2 * cx * (w2 * y).sin();
                }
            }
            for k1 in 1..=k1max {
                let w1 = k1 as f64 * pi / lx;
                for k2 in 1..=k2max {
                    let cc = c[col(k1, k2)];
                    if cc == 0.0 {
                        continue;
                    }
                    let w2 = k2 as f64 * pi / ly;
                    gx -= cc * w2 * (w1 * x).sin() * (w2 * y).cos();
                    gy += cc * w1 * (w1 * x).cos() * (w2 * y).sin();
                }
            }
            (gx, gy)
        };
        let samples = 24;
        for s in 0..=samples {
            let fy = ly * s as f64 / samples as f64;
            let fx = lx * s as f64 / samples as f64;
            for (x, y) in [(0.0, fy), (lx, fy), (fx, 0.0), (fx, ly)] {
                let (gx, gy) = eval_at(x, y);
                boundary_sup = boundary_sup.max(gx.abs()).max(gy.abs());
            }
        }
    }

    // H1 norm by grid quadrature of the assembled field and its analytic
    // gradient.
    let h1_norm = {
        let l2 = (basis.grid_l2(&vx).powi(2) + basis.grid_l2(&vy).powi(2)).sqrt();
        let gvx = basis.grid_gradient(&vx)?;
        let gvy = basis.grid_gradient(&vy)?;
        let g2: f64 = gvx
            .iter()
            .chain(gvy.iter())
            .map(|g| basis.grid_l2(g).powi(2))
            .sum();
        (l2 * l2 + g2).sqrt()
    };

    Ok(BogovskiiSolution {
        velocity: vec![vx, vy],
        div_residual,
        boundary_sup,
        h1_norm,
        source_l2,
    })
}

// ---------------------------------------------------------------------------
// Pressure integrability and effective viscous flux
// ---------------------------------------------------------------------------

/// Largest admissible probe exponent `min(1, gamma/3, 2 gamma/3 - 1)`.
pub fn admissible_theta_max(gamma: f64) -> f64 {
    1.0f64.min(gamma / 3.0).min(2.0 * gamma / 3.0 - 1.0)
}

/// Validate a probe exponent against the admissible range.
pub fn validate_theta(theta: f64, gamma: f64) -> Result<()> {
    let max = admissible_theta_max(gamma);
    if !(theta > 0.0 && theta < max) {
        return Err(Error::ThetaOutOfRange { theta, max });
    }
    Ok(())
}

/// Monte Carlo estimate (mean, standard error) of the raised pressure
/// moment `E int int (a rho^(gamma+theta) + delta rho^(beta+theta))`,
/// consuming trajectories whose paths accumulated the probe moment.
pub fn pressure_integrability(trajs: &[Trajectory], theta: f64, gamma: f64) -> Result<(f64, f64)> {
    validate_theta(theta, gamma)?;
    if trajs.is_empty() {
        return Err(Error::TooFewPaths { needed: 1, got: 0 });
    }
    let vals: Vec<f64> = trajs
        .iter()
        .map(|t| t.points.iter().map(|p| p.press_incr).sum())
        .collect();
    Ok(mean_se(&vals))
}

pub fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean: f64 = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// The effective viscous flux `F = a rho^gamma + delta rho^beta -
/// (lambda + 2 mu) div u` on the grid.
pub fn effective_flux(
    rho: &DensityField,
    u: &CoeffVec,
    params: &SimParams,
    basis: &Basis,
) -> Result<Vec<f64>> {
    let div = basis.divergence(u)?;
    Ok(rho
        .values()
        .iter()
        .zip(&div)
        .map(|(&r, &d)| {
            params.a * r.powf(params.gamma) + params.delta * r.powf(params.beta)
                - (params.lambda + 2.0 * params.mu) * d
        })
        .collect())
}

/// Space-time pairing `int int psi(t) phi(x) F T_k(rho)` of one fully
/// recorded trajectory, using the first battery bump as the localizer.
pub fn flux_pairing(
    traj: &Trajectory,
    cut_level: f64,
    params: &SimParams,
    basis: &Basis,
) -> Result<f64> {
    let full = traj
        .full
        .as_ref()
        .ok_or_else(|| Error::Config("flux_pairing needs a fully recorded trajectory".into()))?;
    let dom = basis.domain().clone();
    let dim = dom.dim();
    let nc = dom.n_cells();
    let steps = full.transport.len();
    let t_final = traj.dt * steps as f64;
    let bump = test_battery(basis, t_final)[0];
    let mut spatial = vec![0.0; nc];
    for c in 0..nc {
        let x = dom.cell_center(c);
        spatial[c] = bump.eval_space(&x[..dim], dim);
    }
    let w = dom.cell_volume();
    let mut acc = 0.0;
    for m in 0..=steps {
        let tv = mollifier((traj.dt * m as f64 - bump.t_center) / bump.t_width);
        if tv == 0.0 {
            continue;
        }
        let rho = DensityField::new(full.densities[m].clone(), basis)?;
        let flux = effective_flux(&rho, &full.u_coeffs[m], params, basis)?;
        let mut step_sum = 0.0;
        for c in 0..nc {
            step_sum += w * spatial[c] * flux[c] * t_k(rho.values()[c], cut_level);
        }
        let weight = if m == 0 || m == steps { 0.5 } else { 1.0 };
        acc += traj.dt * weight * tv * step_sum;
    }
    Ok(acc)
}

/// Space-time flux pairings across a vanishing-parameter schedule, one
/// value per level, with the Cauchy increments between consecutive levels.
/// The desk analog of the flux limit identities is that the increments
/// shrink along the schedule.
pub fn flux_pairing_study(
    levels: &[Vec<Trajectory>],
    cut_level: f64,
    params_per_level: &[SimParams],
    basis: &Basis,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if levels.len() != params_per_level.len() {
        return Err(Error::ShapeMismatch {
            expected: levels.len(),
            got: params_per_level.len(),
        });
    }
    let mut pairings = Vec::with_capacity(levels.len());
    for (trajs, params) in levels.iter().zip(params_per_level) {
        let vals: Vec<f64> = trajs
            .iter()
            .map(|t| flux_pairing(t, cut_level, params, basis))
            .collect::<Result<_>>()?;
        pairings.push(mean_se(&vals).0);
    }
    let increments = pairings.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    Ok((pairings, increments))
}

/// Least-squares projection of a coefficient field onto the discretely
/// divergence-free subspace (see [`DivFreeProjector`]).
pub fn solenoidal_project(b: &CoeffVec, projector: &DivFreeProjector) -> CoeffVec {
    projector.apply(b)
}
