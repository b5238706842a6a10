//! Galerkin space on a box: Dirichlet-Laplacian eigenfunctions, midpoint
//! quadrature grid, and exact spectral differentiation.
//!
//! Scalar modes are products of sines,
//! `phi_k(x) = prod_i sqrt(2/L_i) sin(k_i pi x_i / L_i)`, orthonormal under
//! the tensor midpoint rule as long as every retained frequency stays below
//! the quadrature aliasing limit. Vector fields are expanded componentwise in
//! the scalar modes. Derivatives of spanned fields are evaluated from the
//! analytic mode derivatives; derivatives of plain grid scalars (the density)
//! go through a cosine interpolant, which matches their zero-flux boundary
//! behavior.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

/// Axis-aligned box with a uniform cell-centered quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    dim: usize,
    lengths: [f64; MAX_DIM],
    grid_pts: [usize; MAX_DIM],
}

impl Domain {
    /// `lengths` and `grid_pts` must have matching length 2 or 3; every grid
    /// count must be even and at least 8.
    pub fn new(lengths: &[f64], grid_pts: &[usize]) -> Result<Self> {
        let dim = lengths.len();
        if !(dim == 2 || dim == 3) {
            return Err(Error::Config(format!("dim must be 2 or 3, got {dim}")));
        }
        if grid_pts.len() != dim {
            return Err(Error::Config(format!(
                "grid_pts has {} entries for dim {dim}",
                grid_pts.len()
            )));
        }
        for (a, &l) in lengths.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("length[{a}] must be positive, got {l}")));
            }
        }
        for (a, &n) in grid_pts.iter().enumerate() {
            if n < 8 || n % 2 != 0 {
                return Err(Error::Config(format!(
                    "grid_pts[{a}] must be even and >= 8, got {n}"
                )));
            }
        }
        let mut ls = [0.0; MAX_DIM];
        let mut ns = [1usize; MAX_DIM];
        ls[..dim].copy_from_slice(lengths);
        ns[..dim].copy_from_slice(grid_pts);
        Ok(Self {
            dim,
            lengths: ls,
            grid_pts: ns,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.lengths[axis]
    }

    pub fn grid_pts(&self, axis: usize) -> usize {
        self.grid_pts[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.grid_pts[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Volume of one quadrature cell (uniform).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        self.lengths[..self.dim].iter().product()
    }

    pub fn n_cells(&self) -> usize {
        self.grid_pts[..self.dim].iter().product()
    }

    /// Cell-center coordinate along `axis`.
    pub fn node(&self, axis: usize, i: usize) -> f64 {
        (i as f64 + 0.5) * self.spacing(axis)
    }

    /// Row-major flat index, axis 0 fastest.
    pub fn cell_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for a in (0..self.dim).rev() {
            flat = flat * self.grid_pts[a] + idx[a];
        }
        flat
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_multi_index(&self, mut flat: usize) -> [usize; MAX_DIM] {
        let mut idx = [0usize; MAX_DIM];
        for a in 0..self.dim {
            idx[a] = flat % self.grid_pts[a];
            flat /= self.grid_pts[a];
        }
        idx
    }

    pub fn cell_center(&self, flat: usize) -> [f64; MAX_DIM] {
        let idx = self.cell_multi_index(flat);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = self.node(a, idx[a]);
        }
        x
    }
}

/// Coefficients of a vector field expanded componentwise in the scalar modes.
///
/// Layout is component-major: entry `c * n + k` is the coefficient of scalar
/// mode `k` in component `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffVec {
    data: Vec<f64>,
    n: usize,
    dim: usize,
}

impl CoeffVec {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            data: vec![0.0; n * dim],
            n,
            dim,
        }
    }

    pub fn from_data(data: Vec<f64>, n: usize, dim: usize) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::ShapeMismatch {
                expected: n * dim,
                got: data.len(),
            });
        }
        Ok(Self { data, n, dim })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn comp(&self, c: usize) -> &[f64] {
        &self.data[c * self.n..(c + 1) * self.n]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.n..(c + 1) * self.n]
    }

    pub fn get(&self, c: usize, k: usize) -> f64 {
        self.data[c * self.n + k]
    }

    pub fn set(&mut self, c: usize, k: usize, v: f64) {
        self.data[c * self.n + k] = v;
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &CoeffVec) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn dot(&self, other: &CoeffVec) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm of the coefficients; equals the L2 norm of the field
    /// because the modes are orthonormal.
    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// One-dimensional sample tables of the first `n_per_axis` sine modes and
/// their cosine companions along a single axis.
#[derive(Debug, Clone)]
struct AxisTables {
    /// sin(k pi (i+1/2)/N), flattened k-major, k = 1..=n_per_axis.
    node_sin: Vec<f64>,
    /// cos(k pi (i+1/2)/N), same layout.
    node_cos: Vec<f64>,
    /// sin(k pi i/N) at the N+1 cell faces, k-major.
    face_sin: Vec<f64>,
    n_nodes: usize,
}

/// Full-resolution cosine/sine tables used to differentiate plain grid
/// scalars through their cosine interpolant.
#[derive(Debug, Clone)]
struct CosineTables {
    /// cos(m pi (i+1/2)/N), m = 0..N, m-major, length N*N.
    cos: Vec<f64>,
    /// sin(m pi (i+1/2)/N), same layout.
    sin: Vec<f64>,
}

/// The Galerkin space `X_n`: sorted eigenpairs, sampled mode values, and
/// sampled analytic first derivatives on the quadrature grid.
///
/// Immutable after construction; shared freely across threads.
#[derive(Debug, Clone)]
pub struct Basis {
    domain: Domain,
    n_per_axis: usize,
    /// Multi-indices, sorted by (eigenvalue, lexicographic index).
    modes: Vec<[usize; MAX_DIM]>,
    eigvals: Vec<f64>,
    /// phi[k * ncells + c]: mode k at cell c (normalized).
    phi: Vec<f64>,
    /// dphi[a][k * ncells + c]: d phi_k / d x_a at cell c.
    dphi: Vec<Vec<f64>>,
    axis_tables: Vec<AxisTables>,
    cosine_tables: Vec<CosineTables>,
    /// Per-axis normalization sqrt(2/L_a).
    axis_norm: [f64; MAX_DIM],
    /// (ncells x n) evaluation matrix, column k = phi_k on the grid.
    phi_mat: DMatrix<f64>,
    /// Per-axis (ncells x n) derivative evaluation matrices.
    dphi_mat: Vec<DMatrix<f64>>,
}

/// Construct the Galerkin space with `n_per_axis` retained frequencies per
/// axis. Rejects grids that cannot integrate products of retained modes
/// exactly (fewer than `4 * n_per_axis` points on some axis).
pub fn build_basis(domain: &Domain, n_per_axis: usize) -> Result<Basis> {
    Basis::new(domain.clone(), n_per_axis)
}

impl Basis {
    pub fn new(domain: Domain, n_per_axis: usize) -> Result<Self> {
        if n_per_axis < 1 {
            return Err(Error::Config("n_per_axis must be at least 1".into()));
        }
        const OVERSAMPLING: usize = 4;
        for a in 0..domain.dim() {
            let need = OVERSAMPLING * n_per_axis;
            if domain.grid_pts(a) < need {
                return Err(Error::GridTooCoarse {
                    n_per_axis,
                    needed: need,
                    got: domain.grid_pts(a),
                });
            }
        }

        let dim = domain.dim();
        let mut axis_norm = [1.0; MAX_DIM];
        for a in 0..dim {
            axis_norm[a] = (2.0 / domain.length(a)).sqrt();
        }

        let mut axis_tables = Vec::with_capacity(dim);
        for a in 0..dim {
            let nn = domain.grid_pts(a);
            let mut node_sin = vec![0.0; n_per_axis * nn];
            let mut node_cos = vec![0.0; n_per_axis * nn];
            let mut face_sin = vec![0.0; n_per_axis * (nn + 1)];
            for k in 1..=n_per_axis {
                for i in 0..nn {
                    let arg = k as f64 * std::f64::consts::PI * (i as f64 + 0.5) / nn as f64;
                    node_sin[(k - 1) * nn + i] = arg.sin();
                    node_cos[(k - 1) * nn + i] = arg.cos();
                }
                for i in 0..=nn {
                    // Boundary faces are hard zeros so the advective flux
                    // through the walls vanishes exactly.
                    face_sin[(k - 1) * (nn + 1) + i] = if i == 0 || i == nn {
                        0.0
                    } else {
                        (k as f64 * std::f64::consts::PI * i as f64 / nn as f64).sin()
                    };
                }
            }
            axis_tables.push(AxisTables {
                node_sin,
                node_cos,
                face_sin,
                n_nodes: nn,
            });
        }

        let mut cosine_tables = Vec::with_capacity(dim);
        for a in 0..dim {
            let nn = domain.grid_pts(a);
            let mut cos = vec![0.0; nn * nn];
            let mut sin = vec![0.0; nn * nn];
            for m in 0..nn {
                for i in 0..nn {
                    let arg = m as f64 * std::f64::consts::PI * (i as f64 + 0.5) / nn as f64;
                    cos[m * nn + i] = arg.cos();
                    sin[m * nn + i] = arg.sin();
                }
            }
            cosine_tables.push(CosineTables { cos, sin });
        }

        // Enumerate multi-indices and sort by eigenvalue.
        let mut modes: Vec<[usize; MAX_DIM]> = Vec::new();
        let mut counter = [1usize; MAX_DIM];
        loop {
            let mut m = [1usize; MAX_DIM];
            m[..dim].copy_from_slice(&counter[..dim]);
            modes.push(m);
            let mut a = 0;
            loop {
                counter[a] += 1;
                if counter[a] <= n_per_axis {
                    break;
                }
                counter[a] = 1;
                a += 1;
                if a == dim {
                    break;
                }
            }
            if a == dim {
                break;
            }
        }
        let eig_of = |m: &[usize; MAX_DIM]| -> f64 {
            (0..dim)
                .map(|a| {
                    let w = m[a] as f64 * std::f64::consts::PI / domain.length(a);
                    w * w
                })
                .sum()
        };
        modes.sort_by(|x, y| {
            eig_of(x)
                .partial_cmp(&eig_of(y))
                .unwrap()
                .then_with(|| x.cmp(y))
        });
        let eigvals: Vec<f64> = modes.iter().map(eig_of).collect();

        let ncells = domain.n_cells();
        let n = modes.len();
        let norm: f64 = axis_norm[..dim].iter().product();
        let mut phi = vec![0.0; n * ncells];
        let mut dphi = vec![vec![0.0; n * ncells]; dim];
        for (k, m) in modes.iter().enumerate() {
            for c in 0..ncells {
                let idx = domain.cell_multi_index(c);
                let mut val = norm;
                for a in 0..dim {
                    let t = &axis_tables[a];
                    val *= t.node_sin[(m[a] - 1) * t.n_nodes + idx[a]];
                }
                phi[k * ncells + c] = val;
                for da in 0..dim {
                    let mut dval = norm;
                    for a in 0..dim {
                        let t = &axis_tables[a];
                        let e = (m[a] - 1) * t.n_nodes + idx[a];
                        if a == da {
                            let wave = m[a] as f64 * std::f64::consts::PI / domain.length(a);
                            dval *= wave * t.node_cos[e];
                        } else {
                            dval *= t.node_sin[e];
                        }
                    }
                    dphi[da][k * ncells + c] = dval;
                }
            }
        }

        let phi_mat = DMatrix::from_row_slice(n, ncells, &phi).transpose();
        let dphi_mat = dphi
            .iter()
            .map(|d| DMatrix::from_row_slice(n, ncells, d).transpose())
            .collect();

        Ok(Self {
            domain,
            n_per_axis,
            modes,
            eigvals,
            phi,
            dphi,
            axis_tables,
            cosine_tables,
            axis_norm,
            phi_mat,
            dphi_mat,
        })
    }

    /// (ncells x n) mode evaluation matrix.
    pub fn phi_matrix(&self) -> &DMatrix<f64> {
        &self.phi_mat
    }

    /// (ncells x n) evaluation matrix of `d phi / d x_axis`.
    pub fn dphi_matrix(&self, axis: usize) -> &DMatrix<f64> {
        &self.dphi_mat[axis]
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn n(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    pub fn modes(&self) -> &[[usize; MAX_DIM]] {
        &self.modes
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Position of a multi-index in the sorted mode list.
    pub fn mode_position(&self, m: &[usize]) -> Option<usize> {
        self.modes.iter().position(|mm| &mm[..self.dim()] == m)
    }

    /// Mode values at cell `c` for mode `k`.
    pub fn phi(&self, k: usize, c: usize) -> f64 {
        self.phi[k * self.domain.n_cells() + c]
    }

    pub fn phi_row(&self, k: usize) -> &[f64] {
        let nc = self.domain.n_cells();
        &self.phi[k * nc..(k + 1) * nc]
    }

    pub fn dphi_row(&self, axis: usize, k: usize) -> &[f64] {
        let nc = self.domain.n_cells();
        &self.dphi[axis][k * nc..(k + 1) * nc]
    }

    /// Quadrature of a grid scalar.
    pub fn grid_integral(&self, f: &[f64]) -> f64 {
        self.domain.cell_volume() * f.iter().sum::<f64>()
    }

    /// Quadrature L2 norm of a grid scalar.
    pub fn grid_l2(&self, f: &[f64]) -> f64 {
        (self.domain.cell_volume() * f.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// `c_k = <f, phi_k>` for a scalar grid field.
    pub fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        let nc = self.domain.n_cells();
        if f.len() != nc {
            return Err(Error::ShapeMismatch {
                expected: nc,
                got: f.len(),
            });
        }
        let w = self.domain.cell_volume();
        let fv = DVector::from_column_slice(f);
        let mut out = self.phi_mat.tr_mul(&fv);
        out *= w;
        Ok(out.as_slice().to_vec())
    }

    /// Componentwise projection of a vector grid field.
    pub fn project_vector(&self, f: &[Vec<f64>]) -> Result<CoeffVec> {
        let dim = self.dim();
        if f.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                got: f.len(),
            });
        }
        let mut out = CoeffVec::zeros(self.n(), dim);
        for c in 0..dim {
            let proj = self.project(&f[c])?;
            out.comp_mut(c).copy_from_slice(&proj);
        }
        Ok(out)
    }

    /// `<f, d phi_k / d x_axis>` for all modes; the building block of the
    /// weak (integrated-by-parts) forms.
    pub fn inner_dphi(&self, f: &[f64], axis: usize) -> Vec<f64> {
        let w = self.domain.cell_volume();
        let fv = DVector::from_column_slice(f);
        let mut out = self.dphi_mat[axis].tr_mul(&fv);
        out *= w;
        out.as_slice().to_vec()
    }

    /// Pointwise sum `sum_k c_k phi_k` on the grid.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.n() {
            return Err(Error::ShapeMismatch {
                expected: self.n(),
                got: coeffs.len(),
            });
        }
        let cv = DVector::from_column_slice(coeffs);
        let out = &self.phi_mat * cv;
        Ok(out.as_slice().to_vec())
    }

    pub fn reconstruct_vector(&self, u: &CoeffVec) -> Result<Vec<Vec<f64>>> {
        (0..self.dim()).map(|c| self.reconstruct(u.comp(c))).collect()
    }

    /// Analytic gradient of a spanned scalar, sampled on the grid.
    pub fn scalar_gradient(&self, coeffs: &[f64]) -> Result<Vec<Vec<f64>>> {
        if coeffs.len() != self.n() {
            return Err(Error::ShapeMismatch {
                expected: self.n(),
                got: coeffs.len(),
            });
        }
        let cv = DVector::from_column_slice(coeffs);
        let out = (0..self.dim())
            .map(|a| (&self.dphi_mat[a] * &cv).as_slice().to_vec())
            .collect();
        Ok(out)
    }

    /// All partial derivatives of a spanned vector field on the grid,
    /// layout `grad[c * dim + a] = d u_c / d x_a`.
    pub fn vector_gradient(&self, u: &CoeffVec) -> Result<Vec<Vec<f64>>> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(dim * dim);
        for c in 0..dim {
            let g = self.scalar_gradient(u.comp(c))?;
            out.extend(g);
        }
        Ok(out)
    }

    /// Analytic divergence of a spanned vector field on the grid.
    pub fn divergence(&self, u: &CoeffVec) -> Result<Vec<f64>> {
        let mut out = DVector::zeros(self.domain.n_cells());
        for c in 0..self.dim() {
            let cv = DVector::from_column_slice(u.comp(c));
            out.gemv(1.0, &self.dphi_mat[c], &cv, 1.0);
        }
        Ok(out.as_slice().to_vec())
    }

    /// Analytic curl on the grid. In 2-d this is the single scalar
    /// `d u_y/d x - d u_x/d y`; in 3-d the usual three components.
    pub fn curl(&self, u: &CoeffVec) -> Result<Vec<Vec<f64>>> {
        let g = self.vector_gradient(u)?;
        let d = self.dim();
        let nc = self.domain.n_cells();
        if d == 2 {
            let mut w = vec![0.0; nc];
            for c in 0..nc {
                w[c] = g[2][c] - g[1][c]; // du_y/dx - du_x/dy
            }
            Ok(vec![w])
        } else {
            let mut out = vec![vec![0.0; nc]; 3];
            for c in 0..nc {
                out[0][c] = g[2 * 3 + 1][c] - g[1 * 3 + 2][c]; // dBz/dy - dBy/dz
                out[1][c] = g[2][c] - g[2 * 3][c]; // dBx/dz - dBz/dx
                out[2][c] = g[3][c] - g[1][c]; // dBy/dx - dBx/dy
            }
            Ok(out)
        }
    }

    /// Coefficient map of the Laplacian: multiply mode `k` by `-lambda_k`.
    pub fn apply_laplacian(&self, u: &CoeffVec) -> CoeffVec {
        let mut out = u.clone();
        for c in 0..u.dim() {
            let comp = out.comp_mut(c);
            for (k, v) in comp.iter_mut().enumerate() {
                *v *= -self.eigvals[k];
            }
        }
        out
    }

    /// Exact H1 norm of a spanned vector field,
    /// `sqrt(sum_k (1 + lambda_k) c_k^2)`.
    pub fn h1_norm(&self, u: &CoeffVec) -> f64 {
        let mut s = 0.0;
        for c in 0..u.dim() {
            for (k, &v) in u.comp(c).iter().enumerate() {
                s += (1.0 + self.eigvals[k]) * v * v;
            }
        }
        s.sqrt()
    }

    /// Exact L2 norm of the gradient, `sqrt(sum_k lambda_k c_k^2)`.
    pub fn grad_l2_norm(&self, u: &CoeffVec) -> f64 {
        let mut s = 0.0;
        for c in 0..u.dim() {
            for (k, &v) in u.comp(c).iter().enumerate() {
                s += self.eigvals[k] * v * v;
            }
        }
        s.sqrt()
    }

    /// Grid W{1,inf} norm: max over cells of |u_c| and |d u_c / d x_a|.
    pub fn w1inf_norm(&self, u: &CoeffVec) -> Result<f64> {
        let vals = self.reconstruct_vector(u)?;
        let grads = self.vector_gradient(u)?;
        let mut m: f64 = 0.0;
        for f in vals.iter().chain(grads.iter()) {
            for &v in f {
                m = m.max(v.abs());
            }
        }
        Ok(m)
    }

    /// Normal velocity of a spanned field at every face of `axis`.
    ///
    /// Faces are indexed with the face coordinate fastest: for axis `a` the
    /// flat index is `i_a + (N_a + 1) * rest`, where `rest` runs row-major
    /// over the remaining axes in ascending order. Boundary faces evaluate
    /// to exactly zero because every mode vanishes there.
    pub fn face_normal_velocity(&self, u: &CoeffVec, axis: usize) -> Vec<f64> {
        let dim = self.dim();
        let nf = self.domain.grid_pts(axis) + 1;
        let rest: usize = (0..dim)
            .filter(|&a| a != axis)
            .map(|a| self.domain.grid_pts(a))
            .product();
        let mut out = vec![0.0; nf * rest];
        let comp = u.comp(axis);
        let norm: f64 = self.axis_norm[..dim].iter().product();
        // Decompose `rest` into the other-axis indices.
        let other_axes: Vec<usize> = (0..dim).filter(|&a| a != axis).collect();
        for r in 0..rest {
            let mut idx_other = [0usize; MAX_DIM];
            let mut rr = r;
            for &a in &other_axes {
                idx_other[a] = rr % self.domain.grid_pts(a);
                rr /= self.domain.grid_pts(a);
            }
            for (k, m) in self.modes.iter().enumerate() {
                let ck = comp[k];
                if ck == 0.0 {
                    continue;
                }
                let mut tang = norm * ck;
                for &a in &other_axes {
                    let t = &self.axis_tables[a];
                    tang *= t.node_sin[(m[a] - 1) * t.n_nodes + idx_other[a]];
                }
                if tang == 0.0 {
                    continue;
                }
                let t = &self.axis_tables[axis];
                let base = (m[axis] - 1) * (t.n_nodes + 1);
                for i in 0..nf {
                    out[i + nf * r] += tang * t.face_sin[base + i];
                }
            }
        }
        out
    }

    /// Point evaluation of a spanned vector field.
    pub fn eval_vector_at(&self, u: &CoeffVec, x: &[f64]) -> [f64; MAX_DIM] {
        let dim = self.dim();
        let norm: f64 = self.axis_norm[..dim].iter().product();
        let mut out = [0.0; MAX_DIM];
        for (k, m) in self.modes.iter().enumerate() {
            let mut v = norm;
            for a in 0..dim {
                v *= (m[a] as f64 * std::f64::consts::PI * x[a] / self.domain.length(a)).sin();
            }
            for c in 0..dim {
                out[c] += u.get(c, k) * v;
            }
        }
        out
    }

    /// Point evaluation of the analytic curl of a spanned 3-d vector field.
    pub fn eval_curl_at(&self, u: &CoeffVec, x: &[f64]) -> [f64; 3] {
        assert_eq!(self.dim(), 3, "eval_curl_at requires a 3-d basis");
        let norm: f64 = self.axis_norm[..3].iter().product();
        // partial[c][a] = d u_c / d x_a at x
        let mut partial = [[0.0f64; 3]; 3];
        for (k, m) in self.modes.iter().enumerate() {
            let mut s = [0.0; 3];
            let mut co = [0.0; 3];
            let mut wave = [0.0; 3];
            for a in 0..3 {
                let arg = m[a] as f64 * std::f64::consts::PI * x[a] / self.domain.length(a);
                s[a] = arg.sin();
                co[a] = arg.cos();
                wave[a] = m[a] as f64 * std::f64::consts::PI / self.domain.length(a);
            }
            for a in 0..3 {
                let mut dv = norm * wave[a];
                for b in 0..3 {
                    dv *= if b == a { co[b] } else { s[b] };
                }
                for c in 0..3 {
                    let ck = u.get(c, k);
                    if ck != 0.0 {
                        partial[c][a] += ck * dv;
                    }
                }
            }
        }
        [
            partial[2][1] - partial[1][2],
            partial[0][2] - partial[2][0],
            partial[1][0] - partial[0][1],
        ]
    }

    /// Gradient of a plain grid scalar via its cosine interpolant
    /// (spectrally accurate for fields with zero normal derivative on the
    /// boundary, which is the density's boundary condition).
    pub fn grid_gradient(&self, f: &[f64]) -> Result<Vec<Vec<f64>>> {
        let nc = self.domain.n_cells();
        if f.len() != nc {
            return Err(Error::ShapeMismatch {
                expected: nc,
                got: f.len(),
            });
        }
        let dim = self.dim();
        let mut out = Vec::with_capacity(dim);
        for a in 0..dim {
            out.push(self.grid_derivative_axis(f, a));
        }
        Ok(out)
    }

    fn grid_derivative_axis(&self, f: &[f64], axis: usize) -> Vec<f64> {
        let nn = self.domain.grid_pts(axis);
        let nc = self.domain.n_cells();
        let tables = &self.cosine_tables[axis];
        let stride: usize = self.domain.grid_pts_below(axis);
        let n_lines = nc / nn;
        let mut out = vec![0.0; nc];
        let mut line = vec![0.0; nn];
        let mut fhat = vec![0.0; nn];
        let wave = std::f64::consts::PI / self.domain.length(axis);
        for l in 0..n_lines {
            // Base flat index of this line.
            let low = l % stride;
            let high = l / stride;
            let base = low + high * stride * nn;
            for i in 0..nn {
                line[i] = f[base + i * stride];
            }
            // Forward cosine transform (midpoint orthogonality).
            for m in 1..nn {
                let row = &tables.cos[m * nn..(m + 1) * nn];
                fhat[m] = 2.0 / nn as f64 * dot(row, &line);
            }
            // Derivative: sum_m fhat_m * (-m pi / L) sin(m pi x / L).
            for i in 0..nn {
                let mut g = 0.0;
                for m in 1..nn {
                    g -= fhat[m] * (m as f64 * wave) * tables.sin[m * nn + i];
                }
                out[base + i * stride] = g;
            }
        }
        out
    }
}

impl Domain {
    /// Product of grid counts on axes below `axis` (the flat-index stride of
    /// that axis).
    fn grid_pts_below(&self, axis: usize) -> usize {
        self.grid_pts[..axis].iter().product()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
