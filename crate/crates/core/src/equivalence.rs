//! Linear changes of the reference cell and numeric checks that the
//! homogenized problem does not depend on them.
//!
//! A transform `F` maps the cell `Y` onto `Z = F(Y)` and every chart `φ` onto
//! `F ∘ φ`. Only signed axis permutations composed with positive per-axis
//! scalings are supported, so `Z` stays a box and the structured solvers apply
//! unchanged.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cell::{CellProblem, CoefficientField};
use crate::error::{Error, Result};
use crate::fieldgrid::{integrate_with, partial, BoundaryKind, Grid, GridFunction, MetricSamples};
use crate::geometry::{validate_uc, AffineMap, Atlas, Chart, MetricField, Pushforward, ScalarField, VectorField};
use crate::solve::{
    effective_coefficients, fine_grid, oscillating_coefficient, solve_homogenized, EffectiveCoefficients,
    ProblemSpec, SolveResult, SolverOptions,
};

/// Gaps below this are treated as rounding noise by the refinement test.
pub const GAP_FLOOR: f64 = 1e-9;

/// `F = P S`: row `a` of `F` has the single entry `factor[a]` in column `perm[a]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtlasTransform {
    perm: Vec<usize>,
    factor: Vec<f64>,
}

impl AtlasTransform {
    pub fn new(perm: Vec<usize>, factor: Vec<f64>) -> Result<Self> {
        let n = perm.len();
        if n == 0 || factor.len() != n {
            return Err(Error::Transform("permutation and factors must have the same nonzero length".into()));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::Transform(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        if factor.iter().any(|s| !(s.is_finite() && *s != 0.0)) {
            return Err(Error::Transform(format!("scale factors must be finite and nonzero, got {factor:?}")));
        }
        Ok(AtlasTransform { perm, factor })
    }

    pub fn identity(n: usize) -> Self {
        AtlasTransform {
            perm: (0..n).collect(),
            factor: vec![1.0; n],
        }
    }

    /// The 2D axis swap `Sk`.
    pub fn swap() -> Self {
        AtlasTransform {
            perm: vec![1, 0],
            factor: vec![1.0, 1.0],
        }
    }

    pub fn scaling(n: usize, s: f64) -> Result<Self> {
        Self::new((0..n).collect(), vec![s; n])
    }

    /// Accepts any matrix with exactly one nonzero entry per row and column.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::Transform("F must be square".into()));
        }
        let mut perm = Vec::with_capacity(n);
        let mut factor = Vec::with_capacity(n);
        for a in 0..n {
            let nz: Vec<usize> = (0..n).filter(|&b| m[(a, b)] != 0.0).collect();
            if nz.len() != 1 {
                return Err(Error::Transform(format!(
                    "row {a} of F has {} nonzero entries; only signed permutations with axis scalings keep the cell a box",
                    nz.len()
                )));
            }
            perm.push(nz[0]);
            factor.push(m[(a, nz[0])]);
        }
        Self::new(perm, factor)
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for a in 0..n {
            m[(a, self.perm[a])] = self.factor[a];
        }
        m
    }

    pub fn inverse_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for a in 0..n {
            m[(self.perm[a], a)] = 1.0 / self.factor[a];
        }
        m
    }

    pub fn map(&self) -> AffineMap {
        AffineMap::linear(self.matrix()).expect("signed permutation is invertible")
    }

    pub fn det(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(a, p)| a == *p) && self.factor.iter().all(|s| *s == 1.0)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|a| self.factor[a] * x[self.perm[a]]).collect()
    }

    pub fn apply_inverse(&self, z: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for a in 0..self.dim() {
            x[self.perm[a]] = z[a] / self.factor[a];
        }
        x
    }

    /// Edge lengths of `Z = F(Y)`.
    pub fn target_cell(&self, cell_edge: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|a| self.factor[a].abs() * cell_edge[self.perm[a]]).collect()
    }

    /// Image of the box `[lo, hi]`.
    pub fn target_box(&self, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a = self.apply(lo);
        let b = self.apply(hi);
        let lo = a.iter().zip(&b).map(|(a, b)| a.min(*b)).collect();
        let hi = a.iter().zip(&b).map(|(a, b)| a.max(*b)).collect();
        (lo, hi)
    }

    /// `F_* g = F⁻ᵀ g F⁻¹`.
    pub fn push_metric(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let fi = self.inverse_matrix();
        fi.transpose() * g * fi
    }

    /// `F_* v = F v`.
    pub fn push_vector(&self, v: &[f64]) -> Vec<f64> {
        self.apply(v)
    }

    pub fn describe(&self) -> String {
        let m = self.matrix();
        let rows: Vec<String> = (0..self.dim())
            .map(|a| {
                let r: Vec<String> = (0..self.dim()).map(|b| format!("{}", m[(a, b)])).collect();
                format!("[{}]", r.join(", "))
            })
            .collect();
        format!("F = [{}]", rows.join(", "))
    }
}

/// `D_Z = D_Y ∘ F⁻¹` on `Z`, with the same bounds.
pub fn transform_coefficient(coef: &CoefficientField, t: &AtlasTransform) -> Result<CoefficientField> {
    check_dim(t, coef.dim())?;
    let cell_z = t.target_cell(&coef.cell_edge);
    if t.is_identity() {
        return Ok(coef.clone());
    }
    let src = coef.clone();
    let tt = t.clone();
    let d = ScalarField::from_fn(move |z| src.eval(&tt.apply_inverse(z)).unwrap_or(f64::NAN));
    CoefficientField::new(d, cell_z, coef.d0, coef.d1)
}

fn check_dim(t: &AtlasTransform, n: usize) -> Result<()> {
    if t.dim() != n {
        return Err(Error::Dimension {
            expected: n,
            got: t.dim(),
        });
    }
    Ok(())
}

/// Atlas with charts `F ∘ φ_α`, the same partition and cell `F(Y)`.
pub fn transform_atlas(atlas: &Atlas, t: &AtlasTransform) -> Result<Atlas> {
    check_dim(t, atlas.dim())?;
    let f = t.map();
    let charts = atlas
        .charts
        .iter()
        .map(|c| {
            let m = f.compose(c.map());
            let (lo, hi) = t.target_box(&c.lo, &c.hi);
            Chart::new(c.id.clone(), lo, hi, m.shift().as_slice().to_vec(), m.matrix().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Atlas::with_partition(charts, atlas.partition.clone(), t.target_cell(&atlas.cell_edge))
}

/// The problem seen through the transformed atlas.
///
/// Metric, source and partition live in parameter coordinates and carry over
/// unchanged; the chart metric therefore becomes `J⁻ᵀ g J⁻¹` automatically.
pub fn transform_problem(p: &ProblemSpec, t: &AtlasTransform) -> Result<ProblemSpec> {
    ProblemSpec::new(
        transform_atlas(&p.atlas, t)?,
        p.metric.clone(),
        transform_coefficient(&p.coefficient, t)?,
        p.reaction,
        p.source.clone(),
    )
}

/// For every node of `from`, the index of the node of `to` at `F x`.
pub fn node_map(from: &Grid, to: &Grid, t: &AtlasTransform) -> Result<Vec<usize>> {
    let n = from.dim();
    check_dim(t, n)?;
    let mut idx = vec![0usize; n];
    (0..from.len())
        .map(|i| {
            let z = t.apply(&from.point(i));
            for k in 0..n {
                let s = (z[k] - to.lo[k]) / to.h[k];
                let r = s.round();
                if (s - r).abs() > 1e-6 || r < 0.0 || r as usize >= to.shape[k] {
                    return Err(Error::Transform(format!(
                        "node {i} maps to {z:?}, which is not a node of the target grid"
                    )));
                }
                idx[k] = r as usize;
            }
            Ok(to.flat_index(&idx))
        })
        .collect()
}

/// `max |D^eps_Y(x) − D^eps_Z(F x)|` over the fine grid for `eps`, both via
/// direct evaluation of `D({x/eps})` and via the solver's lattice sampling.
pub fn d_eps_gap(p: &ProblemSpec, pz: &ProblemSpec, t: &AtlasTransform, eps: f64, cells_per_eps: usize) -> Result<f64> {
    validate_uc(&p.atlas, eps)?.into_result()?;
    validate_uc(&pz.atlas, eps)?.into_result()?;
    let (gy, cy) = fine_grid(p, eps, cells_per_eps)?;
    let (gz, cz) = fine_grid(pz, eps, cells_per_eps)?;
    let map = node_map(&gy, &gz, t)?;
    let dy = oscillating_coefficient(p, &gy, &cy)?;
    let dz = oscillating_coefficient(pz, &gz, &cz)?;
    let mut gap = 0.0f64;
    for (i, &j) in map.iter().enumerate() {
        let x = gy.point(i);
        let z = t.apply(&x);
        let direct_y = p.coefficient.eval(&x.iter().map(|v| v / eps).collect::<Vec<_>>())?;
        let direct_z = pz.coefficient.eval(&z.iter().map(|v| v / eps).collect::<Vec<_>>())?;
        gap = gap.max((direct_y - direct_z).abs()).max((dy[i] - dz[j]).abs());
    }
    Ok(gap)
}

/// `max |F_* g_Y(x) − g_Z(F x)|` over `points` (chart coordinates of `p`).
pub fn metric_pushforward_gap(p: &ProblemSpec, pz: &ProblemSpec, t: &AtlasTransform, points: &[Vec<f64>]) -> Result<f64> {
    let my = p.chart_metric();
    let mz = pz.chart_metric();
    let mut gap = 0.0f64;
    for x in points {
        let pushed = t.push_metric(&my.eval(x)?);
        let gz = mz.eval(&t.apply(x))?;
        gap = gap.max((pushed - gz).amax());
    }
    Ok(gap)
}

/// Linear parts of `ψ_β ∘ φ_α⁻¹` for every overlapping pair (and every chart
/// with itself) must coincide; returns the largest deviation from the first.
pub fn transition_gap(source: &Atlas, target: &Atlas) -> Result<f64> {
    if source.charts.len() != target.charts.len() {
        return Err(Error::Transform("atlases have different numbers of charts".into()));
    }
    let mut pairs: Vec<(usize, usize)> = (0..source.charts.len()).map(|a| (a, a)).collect();
    for (a, b) in source.overlapping_pairs() {
        pairs.push((a, b));
        pairs.push((b, a));
    }
    let mats: Vec<DMatrix<f64>> = pairs
        .iter()
        .map(|&(a, b)| {
            target.charts[b]
                .map()
                .compose(&source.charts[a].map().inverse())
                .matrix()
                .clone()
        })
        .collect();
    Ok(mats.iter().map(|m| (m - &mats[0]).amax()).fold(0.0, f64::max))
}

/// `|det F⁻¹| / |Y|` against `1 / |Z|`, relative.
pub fn jacobian_gap(t: &AtlasTransform, cell_edge: &[f64]) -> f64 {
    let y: f64 = cell_edge.iter().product();
    let z: f64 = t.target_cell(cell_edge).iter().product();
    let lhs = 1.0 / t.det().abs() / y;
    let rhs = 1.0 / z;
    (lhs - rhs).abs() / rhs
}

/// `λ` with `λ g_Z = F_* g_Y`, and the entrywise residual of that relation.
pub fn lambda_of(pushed: &DMatrix<f64>, g_z: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = g_z.nrows();
    let inv = g_z
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Transform("target metric is singular".into()))?;
    let lambda = (inv * pushed).trace() / n as f64;
    let gap = (g_z * lambda - pushed).amax();
    Ok((lambda, gap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellTransformReport {
    pub lambda: f64,
    pub lambda_gap: f64,
    /// `‖λ⁻¹ F_* w_Y^Q − w_Z^{F_* Q}‖∞`.
    pub sol_gap: f64,
    /// `‖F_*(∇_Y w_Y^Q) − ∇_Z w_Z^{F_* Q}‖∞`.
    pub grad_gap: f64,
    /// `‖w_Z‖∞`, for scale.
    pub w_max: f64,
}

fn cell_nodes(n_y: usize, cell_edge: &[f64]) -> Vec<Vec<f64>> {
    let n = cell_edge.len();
    let total = n_y.pow(n as u32);
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut y = vec![0.0; n];
            for k in (0..n).rev() {
                y[k] = (rem % n_y) as f64 * cell_edge[k] / n_y as f64;
                rem /= n_y;
            }
            y
        })
        .collect()
}

fn sample_vector(q: &VectorField, nodes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(nodes.len() * q.dim());
    for y in nodes {
        out.extend(q.eval(y)?);
    }
    Ok(out)
}

/// Metric gradient `g⁻¹ ∂w` at every node, `n` components per node.
fn cell_gradient(p: &CellProblem, w: &[f64]) -> Vec<f64> {
    let n = p.dim();
    let diffs: Vec<Vec<f64>> = (0..n).map(|j| p.diff(w, j)).collect();
    let gi = &p.metric.g_inv;
    let mut out = Vec::with_capacity(w.len() * n);
    for c in 0..w.len() {
        for k in 0..n {
            out.push((0..n).map(|j| gi[(k, j)] * diffs[j][c]).sum());
        }
    }
    out
}

/// Solve the generalized cell problem for `Q` on `Y` with metric `g_y` and
/// for `F_* Q` on `Z` with metric `g_z` (default `F_* g_y`), then compare.
///
/// Under `λ g_Z = F_* g_Y` the `Z` energy is `λ⁻¹` times the pushed-forward
/// `Y` energy while the right-hand side does not involve the metric, so the
/// solutions satisfy `λ w_Z = F_* w_Y` and the gradients agree exactly.
pub fn check_cell_transform(
    coef: &CoefficientField,
    g_y: &DMatrix<f64>,
    g_z: Option<&DMatrix<f64>>,
    t: &AtlasTransform,
    q: &VectorField,
    n_y: usize,
    tol: f64,
) -> Result<CellTransformReport> {
    let n = coef.dim();
    check_dim(t, n)?;
    let pushed = t.push_metric(g_y);
    let g_z = g_z.cloned().unwrap_or_else(|| pushed.clone());
    let (lambda, lambda_gap) = lambda_of(&pushed, &g_z)?;
    if !(lambda > 0.0) || lambda_gap > 1e-12 * pushed.amax().max(1.0) {
        return Err(Error::Transform(format!(
            "metrics are not related by a positive factor: λ = {lambda}, residual {lambda_gap:e}"
        )));
    }
    let coef_z = transform_coefficient(coef, t)?;
    let py = CellProblem::with_tol(coef, g_y, n_y, tol)?;
    let pz = CellProblem::with_tol(&coef_z, &g_z, n_y, tol)?;
    let ny = cell_nodes(n_y, &coef.cell_edge);
    let nz = cell_nodes(n_y, &coef_z.cell_edge);
    let wy = py.solve_rhs(&sample_vector(q, &ny)?)?;
    let wz = pz.solve_rhs(&sample_vector(&q.pushforward(&t.map()), &nz)?)?;

    // Z node -> Y node through F⁻¹, wrapped into the cell.
    let h: Vec<f64> = coef.cell_edge.iter().map(|l| l / n_y as f64).collect();
    let map: Vec<usize> = nz
        .iter()
        .map(|z| {
            let y = t.apply_inverse(z);
            (0..n).fold(0usize, |flat, k| {
                let i = ((y[k] / h[k]).round() as i64).rem_euclid(n_y as i64) as usize;
                flat * n_y + i
            })
        })
        .collect();
    let grad_y = cell_gradient(&py, &wy.values);
    let grad_z = cell_gradient(&pz, &wz.values);
    let mut sol_gap = 0.0f64;
    let mut grad_gap = 0.0f64;
    for (j, &i) in map.iter().enumerate() {
        sol_gap = sol_gap.max((wy.values[i] / lambda - wz.values[j]).abs());
        let pushed_grad = t.push_vector(&grad_y[i * n..(i + 1) * n]);
        for k in 0..n {
            grad_gap = grad_gap.max((pushed_grad[k] - grad_z[j * n + k]).abs());
        }
    }
    Ok(CellTransformReport {
        lambda,
        lambda_gap,
        sol_gap,
        grad_gap,
        w_max: wz.values.iter().fold(0.0, |m, v| m.max(v.abs())),
    })
}

/// `‖w^{a Q1 + b Q2} − a w^{Q1} − b w^{Q2}‖∞` on one cell problem.
pub fn cell_linearity_gap(
    coef: &CoefficientField,
    g: &DMatrix<f64>,
    q1: &VectorField,
    q2: &VectorField,
    a: f64,
    b: f64,
    n_y: usize,
    tol: f64,
) -> Result<f64> {
    let p = CellProblem::with_tol(coef, g, n_y, tol)?;
    let nodes = cell_nodes(n_y, &coef.cell_edge);
    let s1 = sample_vector(q1, &nodes)?;
    let s2 = sample_vector(q2, &nodes)?;
    let mix: Vec<f64> = s1.iter().zip(&s2).map(|(u, v)| a * u + b * v).collect();
    let w1 = p.solve_rhs(&s1)?;
    let w2 = p.solve_rhs(&s2)?;
    let wm = p.solve_rhs(&mix)?;
    Ok(wm
        .values
        .iter()
        .zip(w1.values.iter().zip(&w2.values))
        .map(|(m, (u, v))| (m - a * u - b * v).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy)]
pub struct InvarianceOptions {
    /// Scale used for the `D^eps` agreement check.
    pub eps: f64,
    pub cells_per_eps: usize,
    pub n_y: usize,
    /// Macro sample points per axis for x-dependent metrics.
    pub samples: usize,
    /// Homogenized grid points per axis on the coarse level; the fine level
    /// uses `2 points − 1`.
    pub points: usize,
    pub tol: f64,
}

impl Default for InvarianceOptions {
    fn default() -> Self {
        InvarianceOptions {
            eps: 0.125,
            cells_per_eps: 8,
            n_y: 32,
            samples: 3,
            points: 17,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tol: f64) -> Check {
        Check {
            name: name.into(),
            value,
            tol,
            pass: value <= tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelGap {
    pub points: usize,
    /// `‖u_Y − u_Z ∘ F‖_{L²}`.
    pub solution_gap: f64,
    /// `‖F_*(flux_Y) − flux_Z ∘ F‖∞`.
    pub flux_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub transform: String,
    pub lambda: f64,
    /// Eigenvalues of the mixed tensor `B` in each atlas at the first sample.
    pub eigenvalues_y: Vec<f64>,
    pub eigenvalues_z: Vec<f64>,
    pub levels: Vec<LevelGap>,
    pub checks: Vec<Check>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// `B̃ = G B` has the eigenvalues of `B`; compute them from the symmetric
/// `L⁻¹ B̃ L⁻ᵀ` with `G = L Lᵀ`.
fn mixed_eigenvalues(b_tilde: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Vec<f64>> {
    let l = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("metric sample".into()))?
        .l();
    let li = l.try_inverse().ok_or_else(|| Error::NotSpd("metric sample".into()))?;
    let sym = &li * b_tilde * li.transpose();
    Ok(crate::geometry::symmetric_eigenvalues(&((&sym + sym.transpose()) * 0.5)))
}

/// Homogenized flux `B ∇_M u` at every node, `n` components per node.
pub fn homogenized_flux(u: &GridFunction, coeffs: &EffectiveCoefficients, metric: &MetricField) -> Result<Vec<f64>> {
    let grid = &u.grid;
    let n = grid.dim();
    let ms = MetricSamples::new(metric, grid)?;
    let du: Vec<Vec<f64>> = (0..n).map(|k| partial(&u.values, grid, k, u.boundary)).collect();
    let mut out = Vec::with_capacity(grid.len() * n);
    for i in 0..grid.len() {
        let gi = DMatrix::from_row_slice(n, n, ms.g_inv_at(i));
        let d = DVector::from_iterator(n, (0..n).map(|k| du[k][i]));
        let flux = match coeffs {
            EffectiveCoefficients::Mixed(b) => b * &gi * d,
            _ => &gi * coeffs.b_tilde_at(&grid.point(i)) * &gi * d,
        };
        out.extend(flux.iter());
    }
    Ok(out)
}

fn level_gap(
    p: &ProblemSpec,
    pz: &ProblemSpec,
    t: &AtlasTransform,
    cy: &EffectiveCoefficients,
    cz: &EffectiveCoefficients,
    points: usize,
    opts: SolverOptions,
) -> Result<LevelGap> {
    let n = p.dim();
    let (ylo, yhi) = (&p.chart().lo, &p.chart().hi);
    let (zlo, zhi) = (&pz.chart().lo, &pz.chart().hi);
    let gy = Grid::with_points(ylo, yhi, &vec![points; n])?;
    let gz = Grid::with_points(zlo, zhi, &vec![points; n])?;
    let map = node_map(&gy, &gz, t)?;
    let (ry, rz): (Result<SolveResult>, Result<SolveResult>) = rayon::join(
        || solve_homogenized(p, cy, &gy, opts),
        || solve_homogenized(pz, cz, &gz, opts),
    );
    let (ry, rz) = (ry?, rz?);
    let my = p.chart_metric();
    let ms = MetricSamples::new(&my, &gy)?;
    let diff: Vec<f64> = map
        .iter()
        .enumerate()
        .map(|(i, &j)| (ry.u.values[i] - rz.u.values[j]).powi(2))
        .collect();
    let sq = GridFunction::from_values(&p.chart().id, gy.clone(), BoundaryKind::Free, diff)?;
    let solution_gap = integrate_with(&sq, &ms).max(0.0).sqrt();
    let fy = homogenized_flux(&ry.u, cy, &my)?;
    let fz = homogenized_flux(&rz.u, cz, &pz.chart_metric())?;
    let mut flux_gap = 0.0f64;
    for (i, &j) in map.iter().enumerate() {
        let pushed = t.push_vector(&fy[i * n..(i + 1) * n]);
        for k in 0..n {
            flux_gap = flux_gap.max((pushed[k] - fz[j * n + k]).abs());
        }
    }
    Ok(LevelGap {
        points,
        solution_gap,
        flux_gap,
    })
}

/// Refinement passes when the fine gap is at most a third of the coarse one,
/// or when both levels already sit at the rounding floor.
fn shrinks(coarse: f64, fine: f64) -> bool {
    fine <= coarse / 3.0 || fine <= GAP_FLOOR
}

/// Run the homogenization pipeline in both atlases and compare.
pub fn check_invariance(p: &ProblemSpec, t: &AtlasTransform, opts: InvarianceOptions) -> Result<InvarianceReport> {
    check_dim(t, p.dim())?;
    if opts.points < 3 {
        return Err(Error::Config("invariance check needs at least 3 grid points per axis".into()));
    }
    let pz = transform_problem(p, t)?;
    let solver = SolverOptions { tol: opts.tol };

    let mut checks = Vec::new();
    checks.push(Check::at_most("d_eps_gap", d_eps_gap(p, &pz, t, opts.eps, opts.cells_per_eps)?, 1e-13));
    checks.push(Check::at_most("transition_gap", transition_gap(&p.atlas, &pz.atlas)?, 1e-13));
    checks.push(Check::at_most("jacobian_gap", jacobian_gap(t, p.cell_edge()), 1e-13));

    let (cy, cz) = rayon::join(
        || effective_coefficients(p, opts.samples, opts.n_y, opts.tol),
        || effective_coefficients(&pz, opts.samples, opts.n_y, opts.tol),
    );
    let (cy, cz) = (cy?, cz?);

    let py: Vec<Vec<f64>> = cy.points().iter().map(|e| e.x.clone()).collect();
    let pzs: Vec<Vec<f64>> = cz.points().iter().map(|e| e.x.clone()).collect();
    let my = p.chart_metric();
    let mz = pz.chart_metric();
    checks.push(Check::at_most("metric_gap", metric_pushforward_gap(p, &pz, t, &py)?, 1e-12));

    // Match sample points through F and compare tensors.
    let mut lambda = 1.0;
    let mut tensor_gap = 0.0f64;
    let mut eigen_gap = 0.0f64;
    let mut eigenvalues_y = Vec::new();
    let mut eigenvalues_z = Vec::new();
    for (a, x) in py.iter().enumerate() {
        let z = t.apply(x);
        // A constant metric is represented by a single solve at the box corner.
        let b = if pzs.len() == 1 && py.len() == 1 {
            0
        } else {
            pzs.iter()
                .position(|s| s.iter().zip(&z).all(|(u, v)| (u - v).abs() <= 1e-9 * (1.0 + v.abs())))
                .ok_or_else(|| Error::Transform(format!("no sample point of the target atlas at {z:?}")))?
        };
        let (gy, gz) = (my.eval(x)?, mz.eval(&z)?);
        if a == 0 {
            lambda = lambda_of(&t.push_metric(&gy), &gz)?.0;
        }
        let by = &cy.points()[a].tensor.b_tilde;
        let bz = &cz.points()[b].tensor.b_tilde;
        let pushed = t.push_metric(by);
        tensor_gap = tensor_gap.max((&pushed - bz).amax() / bz.amax());
        let ey = mixed_eigenvalues(by, &gy)?;
        let ez = mixed_eigenvalues(bz, &gz)?;
        let scale = ey.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in ey.iter().zip(&ez) {
            eigen_gap = eigen_gap.max((u - v).abs() / scale);
        }
        if a == 0 {
            eigenvalues_y = ey;
            eigenvalues_z = ez;
        }
    }
    checks.push(Check::at_most("tensor_gap", tensor_gap, 1e-6));
    checks.push(Check::at_most("eigenvalue_gap", eigen_gap, 1e-6));

    let coarse = level_gap(p, &pz, t, &cy, &cz, opts.points, solver)?;
    let fine = level_gap(p, &pz, t, &cy, &cz, 2 * opts.points - 1, solver)?;
    for l in [&coarse, &fine] {
        checks.push(Check::at_most(&format!("solution_gap_{}", l.points), l.solution_gap, 1e-6));
        checks.push(Check::at_most(&format!("flux_gap_{}", l.points), l.flux_gap, 1e-6));
    }
    for (name, c, f) in [
        ("solution_gap_shrinks", coarse.solution_gap, fine.solution_gap),
        ("flux_gap_shrinks", coarse.flux_gap, fine.flux_gap),
    ] {
        checks.push(Check {
            name: name.into(),
            value: if c > 0.0 { f / c } else { 0.0 },
            tol: 1.0 / 3.0,
            pass: shrinks(c, f),
        });
    }

    Ok(InvarianceReport {
        transform: t.describe(),
        lambda,
        eigenvalues_y,
        eigenvalues_z,
        levels: vec![coarse, fine],
        checks,
    })
}
