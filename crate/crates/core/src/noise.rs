//! Brownian driving paths and the multiplicative forcing families.
//!
//! Two independent channels of `K` scalar Brownian motions drive the
//! momentum and induction equations. The forcing families are
//!
//! `f_k(rho, m, x) = a_k [ rho^((gamma+1)/2) shape_k(x) e_dir(k) + s_k(x) m ]`
//! and `g_k(B, x) = a_k q_k(x) B`,
//!
//! with spatial profiles bounded by one in sup norm and square-summable
//! amplitudes `a_k = scale * k^(-p)`. The growth constants of these families
//! are finite and computable, and the Galerkin-projected momentum noise is
//! `M^(1/2)[rho] P(f_k / sqrt(rho))`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::io::Write;

use crate::basis::{Basis, CoeffVec};
use crate::error::{Error, Result};
use crate::galerkin::MassOp;
use crate::transport::DensityField;

/// Seeded increments of `K` scalar Brownian motions per channel.
///
/// Each (channel, mode) pair owns one counter-based generator stream
/// (`stream = channel * K + mode`), so the increment array is reproducible
/// and platform-stable given `(seed, K, dt, steps)`.
#[derive(Debug, Clone)]
pub struct BrownianPaths {
    seed: u64,
    k: usize,
    dt: f64,
    steps: usize,
    /// Flattened `[channel][mode][step]`, entries ~ Normal(0, dt).
    increments: Vec<f64>,
}

impl BrownianPaths {
    /// Draw increments over `[0, T]`; `steps = round(T / dt)`.
    pub fn sample(seed: u64, k: usize, t_final: f64, dt: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("noise mode count K must be at least 1".into()));
        }
        if !(dt > 0.0) || t_final < dt {
            return Err(Error::Config(format!(
                "need 0 < dt <= T, got dt = {dt}, T = {t_final}"
            )));
        }
        let steps = (t_final / dt).round() as usize;
        let sqrt_dt = dt.sqrt();
        let mut increments = vec![0.0; 2 * k * steps];
        for channel in 0..2 {
            for mode in 0..k {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((channel * k + mode) as u64);
                let base = (channel * k + mode) * steps;
                for s in 0..steps {
                    let z: f64 = rng.sample(StandardNormal);
                    increments[base + s] = sqrt_dt * z;
                }
            }
        }
        Ok(Self {
            seed,
            k,
            dt,
            steps,
            increments,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn modes(&self) -> usize {
        self.k
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Increment of Brownian motion `mode` in `channel` over step `step`.
    pub fn increment(&self, channel: usize, mode: usize, step: usize) -> f64 {
        self.increments[(channel * self.k + mode) * self.steps + step]
    }

    /// Sum adjacent blocks of `factor` increments: the same realization on a
    /// grid that is `factor` times coarser. Used by coupled refinement
    /// studies so every level consumes identical Brownian paths.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::Config(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut increments = vec![0.0; 2 * self.k * steps];
        for cm in 0..2 * self.k {
            for s in 0..steps {
                let base = cm * self.steps + s * factor;
                increments[cm * steps + s] = self.increments[base..base + factor].iter().sum();
            }
        }
        Ok(Self {
            seed: self.seed,
            k: self.k,
            dt: self.dt * factor as f64,
            steps,
            increments,
        })
    }

    /// Dump as little-endian f64 in `[channel][mode][step]` order.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// The concrete forcing families and their per-mode data.
///
/// Immutable after construction and shared across paths.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    k: usize,
    gamma: f64,
    /// Density-forcing profiles (sup norm 1), one per mode.
    f1_profiles: Vec<Vec<f64>>,
    /// Momentum-transport profiles for the `s_k(x) m` part.
    f2_profiles: Vec<Vec<f64>>,
    /// Induction profiles for `g_k = a_k q_k(x) B`.
    g_profiles: Vec<Vec<f64>>,
    /// Forcing direction of the density part, cycling through axes.
    dirs: Vec<usize>,
    /// Square-summable amplitudes.
    amps: Vec<f64>,
    /// Upper estimate of the dropped tail `sum_(k>K) a_k^2`.
    tail: f64,
}

impl NoiseModel {
    /// Build the default family: sine (Dirichlet) profiles for the density
    /// part, cosine (zero-flux) profiles for the transport and induction
    /// parts, amplitudes `a_k = scale * k^(-decay_p)`.
    pub fn new(basis: &Basis, k: usize, gamma: f64, scale: f64, decay_p: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("noise mode count K must be at least 1".into()));
        }
        if !(decay_p > 0.5) {
            return Err(Error::Config(format!(
                "amplitude decay exponent must exceed 1/2 for a square-summable family, got {decay_p}"
            )));
        }
        let dom = basis.domain();
        let nc = dom.n_cells();
        let dim = dom.dim();
        let mut f1_profiles = Vec::with_capacity(k);
        let mut f2_profiles = Vec::with_capacity(k);
        let mut g_profiles = Vec::with_capacity(k);
        let mut dirs = Vec::with_capacity(k);
        let mut amps = Vec::with_capacity(k);
        for j in 0..k {
            // Low multi-indices in a fixed enumeration: (1,1), (2,1), (1,2), ...
            let (m1, m2) = [(1, 1), (2, 1), (1, 2), (2, 2), (3, 1), (1, 3), (3, 2), (2, 3)]
                [j % 8];
            let bump = 1 + j / 8;
            let mx = (m1 * bump) as f64;
            let my = (m2 * bump) as f64;
            let mut f1 = vec![0.0; nc];
            let mut f2 = vec![0.0; nc];
            let mut g = vec![0.0; nc];
            for c in 0..nc {
                let x = dom.cell_center(c);
                let sx = mx * std::f64::consts::PI * x[0] / dom.length(0);
                let sy = my * std::f64::consts::PI * x[1] / dom.length(1);
                let tail_sin: f64 = if dim == 3 {
                    (std::f64::consts::PI * x[2] / dom.length(2)).sin()
                } else {
                    1.0
                };
                let tail_cos: f64 = if dim == 3 {
                    (std::f64::consts::PI * x[2] / dom.length(2)).cos()
                } else {
                    1.0
                };
                f1[c] = sx.sin() * sy.sin() * tail_sin;
                f2[c] = sx.cos() * sy.cos() * tail_cos;
                g[c] = sx.cos() * sy.sin() * tail_cos;
            }
            f1_profiles.push(f1);
            f2_profiles.push(f2);
            g_profiles.push(g);
            dirs.push(j % dim);
            amps.push(scale * ((j + 1) as f64).powf(-decay_p));
        }
        // Dropped-tail estimate: direct partial sum plus integral remainder.
        let mut tail = 0.0;
        for j in (k + 1)..(k + 100_000) {
            tail += (scale * (j as f64).powf(-decay_p)).powi(2);
        }
        let jmax = (k + 100_000) as f64;
        tail += scale * scale * jmax.powf(1.0 - 2.0 * decay_p) / (2.0 * decay_p - 1.0);
        Ok(Self {
            k,
            gamma,
            f1_profiles,
            f2_profiles,
            g_profiles,
            dirs,
            amps,
            tail,
        })
    }

    pub fn modes(&self) -> usize {
        self.k
    }

    pub fn amps(&self) -> &[f64] {
        &self.amps
    }

    /// Upper estimate of `sum_(k>K) a_k^2`, quantifying the truncated noise
    /// energy.
    pub fn tail_bound(&self) -> f64 {
        self.tail
    }

    /// `f_k(rho, m, x)` for all modes: `K` vector grid fields.
    pub fn eval_f(&self, rho: &DensityField, momentum: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        let nc = rho.values().len();
        let ex = 0.5 * (self.gamma + 1.0);
        let rpow: Vec<f64> = rho.values().iter().map(|r| r.powf(ex)).collect();
        self.eval_f_pow(&rpow, momentum, nc)
    }

    /// As [`eval_f`], reusing a precomputed `rho^((gamma+1)/2)` field.
    pub fn eval_f_pow(
        &self,
        rho_pow: &[f64],
        momentum: &[Vec<f64>],
        nc: usize,
    ) -> Vec<Vec<Vec<f64>>> {
        let dim = momentum.len();
        (0..self.k)
            .map(|j| {
                let mut field = vec![vec![0.0; nc]; dim];
                let a = self.amps[j];
                let dir = self.dirs[j] % dim;
                let f1 = &self.f1_profiles[j];
                let f2 = &self.f2_profiles[j];
                for c in 0..nc {
                    field[dir][c] = a * rho_pow[c] * f1[c];
                    for comp in 0..dim {
                        field[comp][c] += a * f2[c] * momentum[comp][c];
                    }
                }
                field
            })
            .collect()
    }

    /// `g_k(B, x)` for all modes.
    pub fn eval_g(&self, b_vals: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
        let nc = b_vals[0].len();
        let dim = b_vals.len();
        (0..self.k)
            .map(|j| {
                let a = self.amps[j];
                let q = &self.g_profiles[j];
                let mut field = vec![vec![0.0; nc]; dim];
                for comp in 0..dim {
                    for c in 0..nc {
                        field[comp][c] = a * q[c] * b_vals[comp][c];
                    }
                }
                field
            })
            .collect()
    }

    /// Galerkin momentum noise `M^(1/2)[rho] P(f_k / sqrt(rho))` for all
    /// modes. Requires strictly positive density.
    pub fn projected_noise(
        &self,
        rho: &DensityField,
        f_fields: &[Vec<Vec<f64>>],
        massop: &MassOp,
        basis: &Basis,
    ) -> Result<Vec<CoeffVec>> {
        let min = rho.min();
        if !(min > 0.0) {
            return Err(Error::NonPositiveDensity { min });
        }
        let nc = rho.values().len();
        let dim = basis.dim();
        let mut scaled = vec![vec![0.0; nc]; dim];
        let mut out = Vec::with_capacity(f_fields.len());
        for f in f_fields {
            for comp in 0..dim {
                for c in 0..nc {
                    scaled[comp][c] = f[comp][c] / rho.values()[c].sqrt();
                }
            }
            let projected = basis.project_vector(&scaled)?;
            out.push(massop.apply_sqrt(&projected));
        }
        Ok(out)
    }

    /// Plain projections `P(g_k)` used by the induction update.
    pub fn projected_g(&self, b_vals: &[Vec<f64>], basis: &Basis) -> Result<Vec<CoeffVec>> {
        self.eval_g(b_vals)
            .iter()
            .map(|g| basis.project_vector(g))
            .collect()
    }
}

/// Empirical growth constants of the forcing families.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    /// sup of `sum_k |f_(k,1)|^2 / rho^(gamma+1)`.
    pub c_f1: f64,
    /// sup of `sum_k |d_rho f_(k,1)|^2 / rho^(gamma-1)`.
    pub c_df1: f64,
    /// sup of `sum_k |s_k|^2`.
    pub c_f2: f64,
    /// sup of `sum_k |g_k|^2 / |B|^2`.
    pub c_g: f64,
    /// sup of `sum_k |d_B g_k|`.
    pub c_dg: f64,
    /// Dropped amplitude tail `sum_(k>K) a_k^2`.
    pub tail: f64,
}

impl GrowthReport {
    pub fn all_finite(&self) -> bool {
        [self.c_f1, self.c_df1, self.c_f2, self.c_g, self.c_dg, self.tail]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Measure the four growth-bound constants over sample states.
///
/// `states` pairs densities with magnetic grid fields; the momentum part of
/// the bound is state-independent for this family, so any strictly positive
/// density exercises it.
pub fn validate_growth(
    model: &NoiseModel,
    states: &[(DensityField, Vec<Vec<f64>>)],
) -> GrowthReport {
    let mut c_f1 = 0.0f64;
    let mut c_df1 = 0.0f64;
    let mut c_f2 = 0.0f64;
    let mut c_g = 0.0f64;
    let mut c_dg = 0.0f64;
    let dfac = 0.25 * (model.gamma + 1.0) * (model.gamma + 1.0);
    for (rho, b_vals) in states {
        let nc = rho.values().len();
        for c in 0..nc {
            let mut s_f1 = 0.0;
            let mut s_f2 = 0.0;
            let mut s_g = 0.0;
            let mut s_dg = 0.0;
            for j in 0..model.k {
                let a2 = model.amps[j] * model.amps[j];
                s_f1 += a2 * model.f1_profiles[j][c] * model.f1_profiles[j][c];
                s_f2 += a2 * model.f2_profiles[j][c] * model.f2_profiles[j][c];
                s_g += a2 * model.g_profiles[j][c] * model.g_profiles[j][c];
                s_dg += model.amps[j].abs() * model.g_profiles[j][c].abs();
            }
            // |f_(k,1)|^2 = a_k^2 shape^2 rho^(gamma+1): the density cancels
            // in the ratio, so s_f1 is already the constant.
            c_f1 = c_f1.max(s_f1);
            c_df1 = c_df1.max(dfac * s_f1);
            c_f2 = c_f2.max(s_f2);
            c_dg = c_dg.max(s_dg);
            let b2: f64 = b_vals.iter().map(|comp| comp[c] * comp[c]).sum();
            if b2 > 1e-24 {
                // sum |g_k|^2 = (sum a_k^2 q_k^2) |B|^2.
                c_g = c_g.max(s_g);
            }
        }
    }
    GrowthReport {
        c_f1,
        c_df1,
        c_f2,
        c_g,
        c_dg,
        tail: model.tail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Domain;
    use crate::galerkin::mass_op;

    fn setup() -> Basis {
        let dom = Domain::new(&[std::f64::consts::PI, std::f64::consts::PI], &[32, 32]).unwrap();
        Basis::new(dom, 3).unwrap()
    }

    fn uniform(basis: &Basis, c: f64) -> DensityField {
        DensityField::new(vec![c; basis.domain().n_cells()], basis).unwrap()
    }

    #[test]
    fn same_seed_reproduces_increments() {
        let a = BrownianPaths::sample(42, 4, 1.0, 1e-2).unwrap();
        let b = BrownianPaths::sample(42, 4, 1.0, 1e-2).unwrap();
        assert_eq!(a.increments, b.increments);
        let c = BrownianPaths::sample(43, 4, 1.0, 1e-2).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn increment_mean_within_clt_band() {
        let dt = 1e-4;
        let n = 100_000;
        let paths = BrownianPaths::sample(7, 1, dt * n as f64, dt).unwrap();
        let mean: f64 =
            (0..n).map(|s| paths.increment(0, 0, s)).sum::<f64>() / n as f64;
        let band = 5.0 * (dt / n as f64).sqrt();
        assert!(mean.abs() <= band, "mean {mean} outside 5 SE {band}");
    }

    #[test]
    fn quadratic_variation_near_horizon() {
        let dt = 1e-4;
        let n = 100_000;
        let t = dt * n as f64;
        let paths = BrownianPaths::sample(3, 1, t, dt).unwrap();
        let qv: f64 = (0..n).map(|s| paths.increment(0, 0, s).powi(2)).sum();
        // Var(sum dB^2) = 2 n dt^2.
        let se = dt * (2.0 * n as f64).sqrt();
        assert!((qv - t).abs() <= 5.0 * se, "qv {qv} vs horizon {t}");
    }

    #[test]
    fn channels_are_uncorrelated() {
        let dt = 1e-3;
        let n = 50_000;
        let paths = BrownianPaths::sample(11, 1, dt * n as f64, dt).unwrap();
        let mut corr = 0.0;
        for s in 0..n {
            corr += paths.increment(0, 0, s) * paths.increment(1, 0, s);
        }
        corr /= dt * n as f64; // normalized: Var of each increment is dt
        let se = 1.0 / (n as f64).sqrt();
        assert!(corr.abs() <= 5.0 * se, "cross-correlation {corr}");
    }

    #[test]
    fn coarsen_sums_blocks() {
        let paths = BrownianPaths::sample(5, 2, 1.0, 0.125).unwrap();
        let coarse = paths.coarsen(2).unwrap();
        assert_eq!(coarse.steps(), 4);
        assert!((coarse.dt() - 0.25).abs() < 1e-15);
        for ch in 0..2 {
            for m in 0..2 {
                for s in 0..4 {
                    let want = paths.increment(ch, m, 2 * s) + paths.increment(ch, m, 2 * s + 1);
                    assert_eq!(coarse.increment(ch, m, s), want);
                }
            }
        }
    }

    #[test]
    fn eval_f_vanishes_at_vacuum() {
        let basis = setup();
        let model = NoiseModel::new(&basis, 4, 5.0 / 3.0, 0.1, 1.5).unwrap();
        let rho = uniform(&basis, 0.0);
        let m = vec![vec![0.0; basis.domain().n_cells()]; 2];
        for f in model.eval_f(&rho, &m) {
            assert!(f.iter().all(|comp| comp.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn eval_f_growth_bound_and_linearity_in_momentum() {
        let basis = setup();
        let nc = basis.domain().n_cells();
        let model = NoiseModel::new(&basis, 6, 5.0 / 3.0, 0.2, 1.5).unwrap();
        let rho = uniform(&basis, 1.7);
        let zero_m = vec![vec![0.0; nc]; 2];
        let f0 = model.eval_f(&rho, &zero_m);
        // Pointwise bound sum |f_k|^2 <= C rho^(gamma+1) with
        // C = sum a_k^2 max|shape|^2 (= sum a_k^2 here).
        let cbound: f64 = model.amps().iter().map(|a| a * a).sum();
        let gp1 = 5.0 / 3.0 + 1.0;
        for c in 0..nc {
            let s: f64 = f0.iter().map(|f| f[0][c] * f[0][c] + f[1][c] * f[1][c]).sum();
            assert!(s <= cbound * 1.7f64.powf(gp1) * (1.0 + 1e-12));
        }
        // Linearity: with rho = 1 and m = e_x the difference from the m = 0
        // evaluation is exactly a_k s_k(x) e_x.
        let rho1 = uniform(&basis, 1.0);
        let mut m = vec![vec![0.0; nc]; 2];
        m[0] = vec![1.0; nc];
        let f1 = model.eval_f(&rho1, &m);
        let f1z = model.eval_f(&rho1, &zero_m);
        for j in 0..model.modes() {
            for c in 0..nc {
                let want = model.amps()[j] * model.f2_profiles[j][c];
                let got = f1[j][0][c] - f1z[j][0][c];
                assert!((got - want).abs() < 1e-14);
                assert_eq!(f1[j][1][c], f1z[j][1][c]);
            }
        }
    }

    #[test]
    fn eval_g_linear_and_bounded() {
        let basis = setup();
        let nc = basis.domain().n_cells();
        let model = NoiseModel::new(&basis, 5, 5.0 / 3.0, 0.3, 1.5).unwrap();
        let zero = vec![vec![0.0; nc]; 2];
        for g in model.eval_g(&zero) {
            assert!(g.iter().all(|comp| comp.iter().all(|&v| v == 0.0)));
        }
        let dom = basis.domain().clone();
        let b: Vec<Vec<f64>> = (0..2)
            .map(|comp| {
                (0..nc)
                    .map(|c| {
                        let x = dom.cell_center(c);
                        if comp == 0 {
                            x[0].sin() * x[1].sin()
                        } else {
                            0.3 * (2.0 * x[0]).sin() * x[1].sin()
                        }
                    })
                    .collect()
            })
            .collect();
        let b2: Vec<Vec<f64>> = b.iter().map(|f| f.iter().map(|v| 2.0 * v).collect()).collect();
        let g1 = model.eval_g(&b);
        let g2 = model.eval_g(&b2);
        let cbound: f64 = model.amps().iter().map(|a| a * a).sum();
        for j in 0..model.modes() {
            for comp in 0..2 {
                for c in 0..nc {
                    assert!((g2[j][comp][c] - 2.0 * g1[j][comp][c]).abs() < 1e-14);
                }
            }
        }
        for c in 0..nc {
            let bb: f64 = b.iter().map(|comp| comp[c] * comp[c]).sum();
            let gg: f64 = g1
                .iter()
                .map(|g| g.iter().map(|comp| comp[c] * comp[c]).sum::<f64>())
                .sum();
            assert!(gg <= cbound * bb * (1.0 + 1e-12));
        }
    }

    #[test]
    fn projected_noise_reduces_to_projection_for_constant_density() {
        let basis = setup();
        let nc = basis.domain().n_cells();
        let model = NoiseModel::new(&basis, 4, 5.0 / 3.0, 0.2, 1.5).unwrap();
        for &c0 in &[1.0, 2.5] {
            let rho = uniform(&basis, c0);
            let massop = mass_op(&rho, &basis).unwrap();
            let m = vec![vec![0.1; nc]; 2];
            let f = model.eval_f(&rho, &m);
            let projected = model.projected_noise(&rho, &f, &massop, &basis).unwrap();
            for (j, fk) in f.iter().enumerate() {
                let plain = basis.project_vector(fk).unwrap();
                for (a, b) in projected[j].data().iter().zip(plain.data()) {
                    assert!((a - b).abs() < 1e-10, "constant-density reduction failed");
                }
            }
        }
    }

    #[test]
    fn projected_noise_energy_identity() {
        // ||f_k^n||^2 equals the independent quadrature of rho |P(f_k/sqrt
        // rho)|^2, and is dominated by the quadrature of |f_k/sqrt(rho)|^2.
        let basis = setup();
        let dom = basis.domain().clone();
        let nc = dom.n_cells();
        let vals: Vec<f64> = (0..nc)
            .map(|c| {
                let x = dom.cell_center(c);
                1.0 + 0.4 * x[0].cos() * (2.0 * x[1]).cos()
            })
            .collect();
        let rho = DensityField::new(vals, &basis).unwrap();
        let massop = mass_op(&rho, &basis).unwrap();
        let model = NoiseModel::new(&basis, 4, 5.0 / 3.0, 0.2, 1.5).unwrap();
        let m: Vec<Vec<f64>> = (0..2).map(|_| vec![0.2; nc]).collect();
        let f = model.eval_f(&rho, &m);
        let projected = model.projected_noise(&rho, &f, &massop, &basis).unwrap();
        let w = dom.cell_volume();
        for (j, fk) in f.iter().enumerate() {
            let scaled: Vec<Vec<f64>> = (0..2)
                .map(|comp| {
                    (0..nc)
                        .map(|c| fk[comp][c] / rho.values()[c].sqrt())
                        .collect()
                })
                .collect();
            let v = basis.project_vector(&scaled).unwrap();
            let vgrid = basis.reconstruct_vector(&v).unwrap();
            let mut rho_v2 = 0.0;
            let mut fs2 = 0.0;
            for c in 0..nc {
                let v2: f64 = vgrid.iter().map(|comp| comp[c] * comp[c]).sum();
                rho_v2 += w * rho.values()[c] * v2;
                let s2: f64 = scaled.iter().map(|comp| comp[c] * comp[c]).sum();
                fs2 += w * s2;
            }
            let norm2 = projected[j].l2_norm().powi(2);
            assert!(
                (norm2 - rho_v2).abs() <= 1e-8 * rho_v2.max(1e-30),
                "mode {j}: {norm2} vs quadrature {rho_v2}"
            );
            // Projected energy never exceeds the unprojected bound by more
            // than the mass-weighting spread allows; sanity-check magnitude.
            assert!(norm2 <= rho.max() * fs2 * (1.0 + 1e-10));
        }
    }

    #[test]
    fn projected_noise_rejects_vacuum() {
        let basis = setup();
        let rho_pos = uniform(&basis, 1.0);
        let massop = mass_op(&rho_pos, &basis).unwrap();
        let model = NoiseModel::new(&basis, 2, 5.0 / 3.0, 0.1, 1.5).unwrap();
        let nc = basis.domain().n_cells();
        let rho0 = uniform(&basis, 0.0);
        let f = model.eval_f(&rho0, &vec![vec![0.0; nc]; 2]);
        assert!(matches!(
            model.projected_noise(&rho0, &f, &massop, &basis),
            Err(Error::NonPositiveDensity { .. })
        ));
    }

    #[test]
    fn growth_report_matches_closed_form_for_linear_g() {
        let basis = setup();
        let nc = basis.domain().n_cells();
        let scale = 0.4;
        let model = NoiseModel::new(&basis, 6, 5.0 / 3.0, scale, 1.5).unwrap();
        let dom = basis.domain().clone();
        let b: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                (0..nc)
                    .map(|c| {
                        let x = dom.cell_center(c);
                        0.5 + x[0].sin() * x[1].sin()
                    })
                    .collect()
            })
            .collect();
        let report = validate_growth(&model, &[(uniform(&basis, 1.0), b)]);
        // Exact constant: max_x sum a_k^2 q_k(x)^2.
        let mut exact: f64 = 0.0;
        for c in 0..nc {
            let s: f64 = (0..model.modes())
                .map(|j| (model.amps()[j] * model.g_profiles[j][c]).powi(2))
                .sum();
            exact = exact.max(s);
        }
        assert!(report.all_finite());
        assert!(
            (report.c_g - exact).abs() <= 0.01 * exact,
            "c_g {} vs exact {exact}",
            report.c_g
        );
    }

    #[test]
    fn growth_report_zero_for_zero_amplitudes() {
        let basis = setup();
        let model = NoiseModel::new(&basis, 3, 5.0 / 3.0, 0.0, 1.5).unwrap();
        let nc = basis.domain().n_cells();
        let report = validate_growth(&model, &[(uniform(&basis, 1.0), vec![vec![1.0; nc]; 2])]);
        assert_eq!(report.c_f1, 0.0);
        assert_eq!(report.c_df1, 0.0);
        assert_eq!(report.c_f2, 0.0);
        assert_eq!(report.c_g, 0.0);
        assert_eq!(report.c_dg, 0.0);
        assert_eq!(report.tail, 0.0);
    }

    #[test]
    fn doubling_amplitudes_quadruples_f_constants() {
        let basis = setup();
        let nc = basis.domain().n_cells();
        let states = vec![(uniform(&basis, 1.3), vec![vec![0.7; nc]; 2])];
        let m1 = NoiseModel::new(&basis, 5, 5.0 / 3.0, 0.2, 1.5).unwrap();
        let m2 = NoiseModel::new(&basis, 5, 5.0 / 3.0, 0.4, 1.5).unwrap();
        let r1 = validate_growth(&m1, &states);
        let r2 = validate_growth(&m2, &states);
        assert!((r2.c_f1 - 4.0 * r1.c_f1).abs() < 1e-12);
        assert!((r2.c_df1 - 4.0 * r1.c_df1).abs() < 1e-12);
        assert!((r2.c_f2 - 4.0 * r1.c_f2).abs() < 1e-12);
        assert!((r2.tail - 4.0 * r1.tail).abs() < 1e-12 * r1.tail.max(1e-30));
    }

    #[test]
    fn tail_bound_is_small_and_positive() {
        let basis = setup();
        let model = NoiseModel::new(&basis, 8, 5.0 / 3.0, 1.0, 1.5).unwrap();
        let full: f64 = model.amps().iter().map(|a| a * a).sum();
        assert!(model.tail_bound() > 0.0);
        assert!(model.tail_bound() < full, "tail should be below the retained energy");
    }
}
