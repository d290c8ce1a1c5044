//! Node-lattice discretization of `∫ K ∇u·∇φ + m u φ` shared by the cell and
//! macro solvers.
//!
//! Diagonal fluxes live on lattice edges with the endpoint-averaged
//! coefficient; mixed fluxes live on the squares spanned by two axes with the
//! four-corner averaged coefficient and the square-centered gradient pair.
//! The resulting matrix is symmetric by construction.

use crate::linalg::CsrMatrix;

#[derive(Debug, Clone)]
pub struct Lattice {
    pub shape: Vec<usize>,
    pub h: Vec<f64>,
    pub periodic: bool,
    strides: Vec<usize>,
    /// Node -> unknown; `None` for fixed (dirichlet boundary) nodes.
    dof: Vec<Option<usize>>,
    ndof: usize,
}

impl Lattice {
    pub fn new(shape: Vec<usize>, h: Vec<f64>, periodic: bool) -> Self {
        let n = shape.len();
        let mut strides = vec![1; n];
        for k in (0..n.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        let total: usize = shape.iter().product();
        let mut dof = vec![None; total];
        let mut ndof = 0;
        let mut idx = vec![0; n];
        for (node, d) in dof.iter_mut().enumerate() {
            decode(node, &shape, &mut idx);
            let interior = periodic || idx.iter().zip(&shape).all(|(i, s)| *i > 0 && i + 1 < *s);
            if interior {
                *d = Some(ndof);
                ndof += 1;
            }
        }
        Lattice {
            shape,
            h,
            periodic,
            strides,
            dof,
            ndof,
        }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn nodes(&self) -> usize {
        self.dof.len()
    }

    pub fn dofs(&self) -> usize {
        self.ndof
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.iter().product()
    }

    pub fn dof_of(&self, node: usize) -> Option<usize> {
        self.dof[node]
    }

    /// Node one step along `axis`, wrapping on periodic lattices.
    pub fn step(&self, node: usize, axis: usize) -> Option<usize> {
        let i = (node / self.strides[axis]) % self.shape[axis];
        if i + 1 < self.shape[axis] {
            Some(node + self.strides[axis])
        } else if self.periodic {
            Some(node - i * self.strides[axis])
        } else {
            None
        }
    }

    pub fn step_back(&self, node: usize, axis: usize) -> Option<usize> {
        let i = (node / self.strides[axis]) % self.shape[axis];
        if i > 0 {
            Some(node - self.strides[axis])
        } else if self.periodic {
            Some(node + (self.shape[axis] - 1) * self.strides[axis])
        } else {
            None
        }
    }

    pub fn to_dofs(&self, full: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ndof];
        for (node, d) in self.dof.iter().enumerate() {
            if let Some(d) = d {
                out[*d] = full[node];
            }
        }
        out
    }

    /// Scatter unknowns back; fixed nodes get zero.
    pub fn from_dofs(&self, x: &[f64]) -> Vec<f64> {
        self.dof.iter().map(|d| d.map_or(0.0, |d| x[d])).collect()
    }

    fn squares(&self, m: usize, n: usize) -> impl Iterator<Item = [usize; 4]> + '_ {
        (0..self.nodes()).filter_map(move |c| {
            let c1 = self.step(c, m)?;
            let c2 = self.step(c, n)?;
            let c3 = self.step(c1, n)?;
            Some([c, c1, c2, c3])
        })
    }

    /// Matrix of `a(u, φ) + Σ mass_c u_c φ_c` on the unknowns. `k` holds an
    /// `n×n` row-major tensor per node (already multiplied by any volume
    /// density); `mass` is a lumped nodal weight including `|h|`.
    pub fn assemble(&self, k: &[f64], mass: Option<&[f64]>) -> CsrMatrix {
        let n = self.dim();
        let vol = self.cell_volume();
        let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nodes() * (2 * n + 1 + 16 * n * (n - 1) / 2));
        let mut push = |a: usize, b: usize, v: f64| {
            if let (Some(i), Some(j)) = (self.dof[a], self.dof[b]) {
                t.push((i, j, v));
            }
        };
        for m in 0..n {
            let w = vol / (self.h[m] * self.h[m]);
            for a in 0..self.nodes() {
                if let Some(b) = self.step(a, m) {
                    let c = 0.5 * (k[a * n * n + m * n + m] + k[b * n * n + m * n + m]) * w;
                    push(a, a, c);
                    push(b, b, c);
                    push(a, b, -c);
                    push(b, a, -c);
                }
            }
        }
        for m in 0..n {
            for l in m + 1..n {
                let am = [-1.0, 1.0, -1.0, 1.0].map(|s| s / (2.0 * self.h[m]));
                let al = [-1.0, -1.0, 1.0, 1.0].map(|s| s / (2.0 * self.h[l]));
                for sq in self.squares(m, l) {
                    let kml: f64 = sq
                        .iter()
                        .map(|&c| 0.5 * (k[c * n * n + m * n + l] + k[c * n * n + l * n + m]))
                        .sum::<f64>()
                        * 0.25;
                    if kml == 0.0 {
                        continue;
                    }
                    for (ib, &b) in sq.iter().enumerate() {
                        for (ia, &a) in sq.iter().enumerate() {
                            let v = kml * vol * (am[ia] * al[ib] + al[ia] * am[ib]);
                            push(b, a, v);
                        }
                    }
                }
            }
        }
        if let Some(mass) = mass {
            for (a, mv) in mass.iter().enumerate() {
                push(a, a, *mv);
            }
        }
        CsrMatrix::from_triplets(self.ndof, t)
    }

    /// `ℓ(φ) = −Σ_m Σ_{edges ∥ m} q̄^m δ_m φ |h|`, with `q̄^m` the edge average
    /// of the nodal vector field `q` (`n` values per node).
    pub fn flux_functional(&self, q: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let vol = self.cell_volume();
        let mut b = vec![0.0; self.ndof];
        for m in 0..n {
            for a in 0..self.nodes() {
                if let Some(c) = self.step(a, m) {
                    let val = 0.5 * (q[a * n + m] + q[c * n + m]) * vol / self.h[m];
                    if let Some(i) = self.dof[a] {
                        b[i] += val;
                    }
                    if let Some(j) = self.dof[c] {
                        b[j] -= val;
                    }
                }
            }
        }
        b
    }

    /// Central difference along `axis` at every node (one-sided at
    /// non-periodic ends).
    pub fn central_diff(&self, u: &[f64], axis: usize) -> Vec<f64> {
        let h = self.h[axis];
        (0..self.nodes())
            .map(|a| match (self.step_back(a, axis), self.step(a, axis)) {
                (Some(l), Some(r)) => (u[r] - u[l]) / (2.0 * h),
                (None, Some(r)) => (u[r] - u[a]) / h,
                (Some(l), None) => (u[a] - u[l]) / h,
                (None, None) => 0.0,
            })
            .collect()
    }
}

fn decode(mut flat: usize, shape: &[usize], out: &mut [usize]) {
    for k in (0..shape.len()).rev() {
        out[k] = flat % shape[k];
        flat /= shape[k];
    }
}
