//! Periodic cell problems with a frozen metric and the effective tensors.
//!
//! For a base point `x` with metric `G = G(x)` the cell problem reads
//! `∫_Y D g^{mn} ∂_m w ∂_n φ = −∫_Y D Q^m ∂_m φ` for all periodic `φ`, with
//! `Q = ∂/∂y^i` for the canonical directions. Nodes sit at `y_j = j L / N_Y`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{sample_from_matrix, symmetric_eigenvalues, MetricField, MetricSample, ScalarField};
use crate::linalg::{dot, pcg, CgOptions, CsrMatrix};
use crate::stencil::Lattice;

pub const CELL_TOL: f64 = 1e-10;

/// Positive Y-periodic coefficient `D(y)` with bounds `d0 <= D <= d1`.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub d: ScalarField,
    pub cell_edge: Vec<f64>,
    pub d0: f64,
    pub d1: f64,
}

impl CoefficientField {
    pub fn new(d: ScalarField, cell_edge: Vec<f64>, d0: f64, d1: f64) -> Result<Self> {
        if !(d0 > 0.0) || !(d1 >= d0) {
            return Err(Error::Config(format!("coefficient bounds must satisfy 0 < d0 <= D0, got {d0}, {d1}")));
        }
        if cell_edge.is_empty() || cell_edge.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("cell edges must be positive".into()));
        }
        Ok(CoefficientField { d, cell_edge, d0, d1 })
    }

    pub fn constant(v: f64, n: usize) -> Result<Self> {
        Self::new(ScalarField::constant(v), vec![1.0; n], v, v)
    }

    pub fn dim(&self) -> usize {
        self.cell_edge.len()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_edge.iter().product()
    }

    pub fn is_constant(&self) -> bool {
        self.d.as_constant().is_some()
    }

    /// `D(y)` after reducing `y` into `[0, L)`.
    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        let mut buf = [0.0; 3];
        let n = self.dim();
        for k in 0..n {
            buf[k] = y[k].rem_euclid(self.cell_edge[k]);
        }
        self.d.eval(&buf[..n])
    }

    /// Samples at the nodes of an `N_Y^n` cell lattice, bound-checked.
    pub fn sample(&self, n_y: usize) -> Result<Vec<f64>> {
        let n = self.dim();
        let total = n_y.pow(n as u32);
        let mut out = Vec::with_capacity(total);
        let mut y = vec![0.0; n];
        for flat in 0..total {
            let mut rem = flat;
            for k in (0..n).rev() {
                y[k] = (rem % n_y) as f64 * self.cell_edge[k] / n_y as f64;
                rem /= n_y;
            }
            let v = self.eval(&y)?;
            let slack = 1e-12 * self.d1;
            if !(v >= self.d0 - slack && v <= self.d1 + slack) {
                return Err(Error::Config(format!(
                    "D({y:?}) = {v} outside the declared bounds [{}, {}]",
                    self.d0, self.d1
                )));
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// A solution `w` on the cell lattice.
#[derive(Debug, Clone)]
pub struct CellField {
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Assembled periodic cell operator for one frozen metric.
#[derive(Debug, Clone)]
pub struct CellProblem {
    pub lattice: Lattice,
    pub d: Vec<f64>,
    pub metric: MetricSample,
    pub matrix: CsrMatrix,
    pub cell_edge: Vec<f64>,
    opts: CgOptions,
}

impl CellProblem {
    pub fn new(coef: &CoefficientField, g: &DMatrix<f64>, n_y: usize) -> Result<Self> {
        Self::with_tol(coef, g, n_y, CELL_TOL)
    }

    pub fn with_tol(coef: &CoefficientField, g: &DMatrix<f64>, n_y: usize, tol: f64) -> Result<Self> {
        let n = coef.dim();
        if g.nrows() != n || g.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: g.nrows(),
            });
        }
        if n_y < 4 {
            return Err(Error::Config(format!("N_Y must be at least 4, got {n_y}")));
        }
        let metric = sample_from_matrix(g.clone()).map_err(|reason| Error::Geometry { point: vec![], reason })?;
        let d = coef.sample(n_y)?;
        let h: Vec<f64> = coef.cell_edge.iter().map(|l| l / n_y as f64).collect();
        let lattice = Lattice::new(vec![n_y; n], h, true);
        let mut k = Vec::with_capacity(d.len() * n * n);
        for dv in &d {
            for a in 0..n {
                for b in 0..n {
                    k.push(dv * metric.g_inv[(a, b)]);
                }
            }
        }
        let matrix = lattice.assemble(&k, None);
        Ok(CellProblem {
            lattice,
            d,
            metric,
            matrix,
            cell_edge: coef.cell_edge.clone(),
            opts: CgOptions {
                tol,
                max_iter: 50 * n_y,
                project_mean: true,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn n_y(&self) -> usize {
        self.lattice.shape[0]
    }

    /// Solve with the generalized right-hand side given by the nodal vector
    /// field `q` (`n` components per node).
    pub fn solve_rhs(&self, q: &[f64]) -> Result<CellField> {
        let n = self.dim();
        let dq: Vec<f64> = q
            .chunks(n)
            .zip(&self.d)
            .flat_map(|(qv, dv)| qv.iter().map(move |c| c * dv))
            .collect();
        let b = self.lattice.flux_functional(&dq);
        let r = pcg(&self.matrix, &b, self.opts)?;
        Ok(CellField {
            values: r.x,
            iterations: r.iterations,
            residual: r.residual,
        })
    }

    /// `Q = ∂/∂y^i`.
    pub fn solve_direction(&self, i: usize) -> Result<CellField> {
        let n = self.dim();
        let q: Vec<f64> = (0..self.lattice.nodes() * n)
            .map(|a| if a % n == i { 1.0 } else { 0.0 })
            .collect();
        self.solve_rhs(&q)
    }

    /// Central difference of `w` along `axis` at every node.
    pub fn diff(&self, w: &[f64], axis: usize) -> Vec<f64> {
        self.lattice.central_diff(w, axis)
    }

    /// `(1/|Y|) Σ_c D_c ∂_k w(c) |h|`.
    pub fn mean_flux(&self, w: &[f64], k: usize) -> f64 {
        let dk = self.diff(w, k);
        dot(&self.d, &dk) / self.d.len() as f64
    }

    pub fn mean_d(&self) -> f64 {
        self.d.iter().sum::<f64>() / self.d.len() as f64
    }

    /// Discrete energy `a(u, v)`.
    pub fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        dot(u, &self.matrix.mul(v))
    }
}

/// `w_1 .. w_n` for one frozen metric.
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub problem: CellProblem,
    pub w: Vec<CellField>,
}

impl CellSolution {
    pub fn g(&self) -> &DMatrix<f64> {
        &self.problem.metric.g
    }

    pub fn max_residual(&self) -> f64 {
        self.w.iter().fold(0.0, |m, f| m.max(f.residual))
    }

    pub fn iterations(&self) -> usize {
        self.w.iter().map(|f| f.iterations).sum()
    }
}

/// Solve the cell problem for direction `i`.
pub fn solve_cell(coef: &CoefficientField, g: &DMatrix<f64>, i: usize, n_y: usize) -> Result<CellField> {
    CellProblem::new(coef, g, n_y)?.solve_direction(i)
}

/// Solve all `n` directions (in parallel).
pub fn solve_cell_all(coef: &CoefficientField, g: &DMatrix<f64>, n_y: usize, tol: f64) -> Result<CellSolution> {
    let problem = CellProblem::with_tol(coef, g, n_y, tol)?;
    let w = (0..problem.dim())
        .into_par_iter()
        .map(|i| problem.solve_direction(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellSolution { problem, w })
}

#[derive(Debug, Clone)]
pub struct EffectiveTensor {
    /// `A_i^k` per node: `a_field[node * n*n + k*n + i]`.
    pub a_field: Vec<f64>,
    /// Mixed tensor; `b[(k, i)] = B_i^k`.
    pub b: DMatrix<f64>,
    /// `B̃_{ki} = Σ_j g_{kj} B_i^j`.
    pub b_tilde: DMatrix<f64>,
    /// Ascending eigenvalues of the symmetrized `B̃`.
    pub eigenvalues: Vec<f64>,
}

/// `A`, `B` and `B̃` from a converged cell solution.
pub fn assemble_effective(sol: &CellSolution) -> EffectiveTensor {
    let p = &sol.problem;
    let n = p.dim();
    let nodes = p.lattice.nodes();
    let diffs: Vec<Vec<Vec<f64>>> = sol
        .w
        .iter()
        .map(|w| (0..n).map(|j| p.diff(&w.values, j)).collect())
        .collect();
    let gi = &p.metric.g_inv;
    let mut a_field = vec![0.0; nodes * n * n];
    for c in 0..nodes {
        for k in 0..n {
            for i in 0..n {
                a_field[c * n * n + k * n + i] = (0..n).map(|j| gi[(k, j)] * diffs[i][j][c]).sum();
            }
        }
    }
    let mut b = DMatrix::zeros(n, n);
    for k in 0..n {
        for i in 0..n {
            let delta = if i == k { 1.0 } else { 0.0 };
            let s: f64 = (0..nodes).map(|c| p.d[c] * (delta + a_field[c * n * n + k * n + i])).sum();
            b[(k, i)] = s / nodes as f64;
        }
    }
    let b_tilde = &p.metric.g * &b;
    let eigenvalues = symmetric_eigenvalues(&b_tilde);
    EffectiveTensor {
        a_field,
        b,
        b_tilde,
        eigenvalues,
    }
}

/// `B̃_{βα} = (1/|Y|) ∫ D g(e_β + ∇w_β, e_α + ∇w_α)`, expanded as
/// `g_{αβ} mean(D) + L_β(w_α) + L_α(w_β) + a(w_α, w_β)/|Y|`.
pub fn btilde_quadratic(sol: &CellSolution) -> DMatrix<f64> {
    let p = &sol.problem;
    let n = p.dim();
    let ybar = p.cell_edge.iter().product::<f64>();
    let md = p.mean_d();
    let mut out = DMatrix::zeros(n, n);
    for beta in 0..n {
        for alpha in beta..n {
            let (wa, wb) = (&sol.w[alpha].values, &sol.w[beta].values);
            let v = p.metric.g[(alpha, beta)] * md
                + p.mean_flux(wa, beta)
                + p.mean_flux(wb, alpha)
                + p.energy(wa, wb) / ybar;
            out[(beta, alpha)] = v;
            out[(alpha, beta)] = v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdReport {
    /// `‖B̃ − B̃ᵀ‖∞ / ‖B̃‖∞`.
    pub asymmetry: f64,
    pub symmetric: bool,
    pub min_eig: f64,
    /// `0.9 · d0 · λ_min(G)`.
    pub floor: f64,
    /// False means the plausibility floor was missed; this only warns.
    pub floor_ok: bool,
}

pub fn check_spd(t: &EffectiveTensor, g: &DMatrix<f64>, d0: f64) -> Result<SpdReport> {
    let bt = &t.b_tilde;
    let scale = bt.amax().max(f64::MIN_POSITIVE);
    let asymmetry = (bt - bt.transpose()).amax() / scale;
    let min_eig = t.eigenvalues[0];
    let floor = 0.9 * d0 * symmetric_eigenvalues(g)[0];
    let report = SpdReport {
        asymmetry,
        symmetric: asymmetry <= 1e-8,
        min_eig,
        floor,
        floor_ok: min_eig >= floor,
    };
    if !report.symmetric {
        return Err(Error::NotSpd(format!("effective tensor asymmetry {asymmetry:e}")));
    }
    if !(min_eig > 0.0) {
        return Err(Error::NotSpd(format!("effective tensor min eigenvalue {min_eig:e}")));
    }
    Ok(report)
}

/// Effective data at one base point.
#[derive(Debug, Clone)]
pub struct EffectivePoint {
    pub x: Vec<f64>,
    pub tensor: EffectiveTensor,
    pub b_quadratic: DMatrix<f64>,
    pub spd: SpdReport,
    pub solution: Arc<CellSolution>,
}

impl EffectivePoint {
    pub fn residual(&self) -> f64 {
        self.solution.max_residual()
    }
}

fn quantize(g: &DMatrix<f64>) -> Vec<i64> {
    g.iter().map(|v| (v / 1e-12).round() as i64).collect()
}

type Solved = (Arc<CellSolution>, EffectiveTensor, DMatrix<f64>, SpdReport);

/// Cell solves for each base point in `xs` (chart coordinates); points whose
/// metric agrees after quantization to 1e-12 share one solve.
pub fn effective_field(
    coef: &CoefficientField,
    metric: &MetricField,
    xs: &[Vec<f64>],
    n_y: usize,
    tol: f64,
) -> Result<Vec<EffectivePoint>> {
    let gs = xs.iter().map(|x| metric.eval(x)).collect::<Result<Vec<_>>>()?;
    let mut keys: Vec<Vec<i64>> = Vec::new();
    let mut first_of: HashMap<Vec<i64>, usize> = HashMap::new();
    for (i, g) in gs.iter().enumerate() {
        let key = quantize(g);
        if !first_of.contains_key(&key) {
            first_of.insert(key.clone(), i);
            keys.push(key);
        }
    }
    let solved: Vec<Solved> = keys
        .par_iter()
        .map(|key| {
            let i = first_of[key];
            metric.metric_at(&xs[i])?;
            let sol = solve_cell_all(coef, &gs[i], n_y, tol)?;
            let tensor = assemble_effective(&sol);
            let quad = btilde_quadratic(&sol);
            let spd = check_spd(&tensor, &gs[i], coef.d0)?;
            Ok((Arc::new(sol), tensor, quad, spd))
        })
        .collect::<Result<Vec<_>>>()?;
    let index: HashMap<&Vec<i64>, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    Ok(xs
        .iter()
        .zip(&gs)
        .map(|(x, g)| {
            let (sol, tensor, quad, spd) = &solved[index[&quantize(g)]];
            EffectivePoint {
                x: x.clone(),
                tensor: tensor.clone(),
                b_quadratic: quad.clone(),
                spd: *spd,
                solution: Arc::clone(sol),
            }
        })
        .collect())
}

/// Number of distinct cell solves [`effective_field`] performs for `xs`.
pub fn distinct_metrics(metric: &MetricField, xs: &[Vec<f64>]) -> Result<usize> {
    let mut seen = std::collections::HashSet::new();
    for x in xs {
        seen.insert(quantize(&metric.eval(x)?));
    }
    Ok(seen.len())
}
