//! Fine-scale and homogenized Dirichlet problems on the computational chart,
//! corrector reconstruction and the eps-convergence study.
//!
//! The computational chart is the first chart of the atlas; its box is the
//! problem domain and `u = 0` on its boundary.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cell::{effective_field, CoefficientField, EffectivePoint, CELL_TOL};
use crate::error::{Error, Result};
use crate::fieldgrid::{grad_with, norms_with, BoundaryKind, Grid, GridFunction, MetricSamples};
use crate::geometry::{validate_uc, Atlas, Chart, MetricField, Pushforward, ScalarField};
use crate::linalg::{dot, pcg, CgOptions};
use crate::stencil::Lattice;
use crate::unfolding::{ucm_residual, unfold_local, UnfoldConfig};

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub atlas: Atlas,
    /// Metric coefficients in parameter coordinates.
    pub metric: MetricField,
    pub coefficient: CoefficientField,
    /// Reaction coefficient `c >= 0`.
    pub reaction: f64,
    /// Source `f` in parameter coordinates.
    pub source: ScalarField,
}

impl ProblemSpec {
    pub fn new(atlas: Atlas, metric: MetricField, coefficient: CoefficientField, reaction: f64, source: ScalarField) -> Result<Self> {
        let n = atlas.dim();
        if metric.dim() != n || coefficient.dim() != n {
            return Err(Error::Dimension {
                expected: n,
                got: if metric.dim() != n { metric.dim() } else { coefficient.dim() },
            });
        }
        if !(reaction >= 0.0 && reaction.is_finite()) {
            return Err(Error::Config(format!("reaction coefficient must be >= 0, got {reaction}")));
        }
        if atlas
            .cell_edge
            .iter()
            .zip(&coefficient.cell_edge)
            .any(|(a, b)| (a - b).abs() > 1e-14 * a.abs())
        {
            return Err(Error::Config("coefficient cell and atlas cell differ".into()));
        }
        Ok(ProblemSpec {
            atlas,
            metric,
            coefficient,
            reaction,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.atlas.dim()
    }

    /// The computational chart.
    pub fn chart(&self) -> &Chart {
        &self.atlas.charts[0]
    }

    pub fn chart_metric(&self) -> MetricField {
        self.metric.pushforward(self.chart().map())
    }

    pub fn chart_source(&self) -> ScalarField {
        self.source.pushforward(self.chart().map())
    }

    pub fn cell_edge(&self) -> &[f64] {
        &self.atlas.cell_edge
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Zero on the box boundary.
    pub u: GridFunction,
    pub residual: f64,
    /// Discrete `a(u, u) + ∫ c u² dvol`.
    pub energy: f64,
    /// Discrete `∫ f u dvol`.
    pub load: f64,
    pub iterations: usize,
}

fn solve_dirichlet(
    chart_id: &str,
    grid: &Grid,
    k: &[f64],
    ms: &MetricSamples,
    reaction: f64,
    f: &[f64],
    opts: SolverOptions,
) -> Result<SolveResult> {
    let lattice = Lattice::new(grid.shape.clone(), grid.h.clone(), false);
    let vol = grid.cell_volume();
    let mass: Vec<f64> = ms.sqrt_det.iter().map(|s| reaction * s * vol).collect();
    let a = lattice.assemble(k, Some(&mass));
    let load: Vec<f64> = f.iter().zip(&ms.sqrt_det).map(|(f, s)| f * s * vol).collect();
    let b = lattice.to_dofs(&load);
    let max_iter = 200 * grid.shape.iter().max().copied().unwrap_or(2) + 1000;
    let r = pcg(&a, &b, CgOptions { tol: opts.tol, max_iter, project_mean: false })?;
    let energy = a.quadratic(&r.x);
    let load_dot = dot(&b, &r.x);
    let u = GridFunction::from_values(chart_id, grid.clone(), BoundaryKind::Dirichlet, lattice.from_dofs(&r.x))?;
    Ok(SolveResult {
        u,
        residual: r.residual,
        energy,
        load: load_dot,
        iterations: r.iterations,
    })
}

/// Fine grid and unfolding configuration for `eps` with `N_c` points per cell edge.
pub fn fine_grid(p: &ProblemSpec, eps: f64, cells_per_eps: usize) -> Result<(Grid, UnfoldConfig)> {
    if cells_per_eps < 8 {
        return Err(Error::Config(format!(
            "eps/h must be at least 8 to resolve the microstructure, got {cells_per_eps}"
        )));
    }
    let cfg = UnfoldConfig::new(eps, cells_per_eps, p.cell_edge().to_vec())?;
    let c = p.chart();
    let grid = Grid::for_box(&c.lo, &c.hi, &cfg.h())?;
    cfg.lattice(&grid)?;
    Ok((grid, cfg))
}

/// `D^eps` at the grid nodes, read from the global lattice index so that the
/// fine and cell samples coincide when `N_Y = N_c`.
pub fn oscillating_coefficient(p: &ProblemSpec, grid: &Grid, cfg: &UnfoldConfig) -> Result<Vec<f64>> {
    let n = grid.dim();
    let nc = cfg.cells_per_eps as i64;
    let h = cfg.h();
    (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            let y: Vec<f64> = (0..n)
                .map(|k| {
                    let idx = (x[k] / h[k]).round() as i64;
                    idx.rem_euclid(nc) as f64 * cfg.cell_edge[k] / nc as f64
                })
                .collect();
            p.coefficient.eval(&y)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FineSolution {
    pub result: SolveResult,
    pub cfg: UnfoldConfig,
    pub d_eps: Vec<f64>,
}

/// Solve `−div_M(D^eps ∇_M u) + c u = f`, `u = 0` on the boundary, with
/// `h = eps L / N_c`.
pub fn solve_fine(p: &ProblemSpec, eps: f64, cells_per_eps: usize, opts: SolverOptions) -> Result<FineSolution> {
    validate_uc(&p.atlas, eps)?.into_result()?;
    let (grid, cfg) = fine_grid(p, eps, cells_per_eps)?;
    let metric = p.chart_metric();
    let ms = MetricSamples::new(&metric, &grid)?;
    let d_eps = oscillating_coefficient(p, &grid, &cfg)?;
    let n = grid.dim();
    let mut k = Vec::with_capacity(grid.len() * n * n);
    for (i, d) in d_eps.iter().enumerate() {
        let gi = ms.g_inv_at(i);
        let s = ms.sqrt_det[i];
        k.extend(gi.iter().map(|v| d * v * s));
    }
    let f = GridFunction::from_field(&p.chart().id, grid.clone(), BoundaryKind::Free, &p.chart_source())?;
    let result = solve_dirichlet(&p.chart().id, &grid, &k, &ms, p.reaction, &f.values, opts)?;
    Ok(FineSolution { result, cfg, d_eps })
}

/// Effective coefficients over the computational chart.
#[derive(Debug, Clone)]
pub enum EffectiveCoefficients {
    /// A prescribed constant mixed tensor `B`.
    Mixed(DMatrix<f64>),
    /// One cell solve (the metric is constant).
    Constant(EffectivePoint),
    /// Cell solves on a sample grid, `B̃` interpolated multilinearly.
    Sampled { grid: Grid, points: Vec<EffectivePoint> },
}

impl EffectiveCoefficients {
    pub fn points(&self) -> Vec<&EffectivePoint> {
        match self {
            EffectiveCoefficients::Mixed(_) => vec![],
            EffectiveCoefficients::Constant(p) => vec![p],
            EffectiveCoefficients::Sampled { points, .. } => points.iter().collect(),
        }
    }

    /// Interpolation weights `(sample index, weight)` at `x`.
    fn weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        match self {
            EffectiveCoefficients::Sampled { grid, .. } => multilinear_weights(grid, x),
            _ => vec![(0, 1.0)],
        }
    }

    /// Flux tensor `K = B g^{-1} √|G|` at `x`.
    fn flux_tensor(&self, x: &[f64], g_inv: &DMatrix<f64>, sqrt_det: f64) -> DMatrix<f64> {
        match self {
            EffectiveCoefficients::Mixed(b) => b * g_inv * sqrt_det,
            _ => g_inv * self.b_tilde_at(x) * g_inv * sqrt_det,
        }
    }

    /// `B̃(x)` (interpolated between samples).
    pub fn b_tilde_at(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            EffectiveCoefficients::Mixed(b) => b.clone(),
            EffectiveCoefficients::Constant(p) => p.tensor.b_tilde.clone(),
            EffectiveCoefficients::Sampled { points, .. } => {
                let n = points[0].tensor.b_tilde.nrows();
                let mut acc = DMatrix::zeros(n, n);
                for (i, w) in self.weights(x) {
                    acc += &points[i].tensor.b_tilde * w;
                }
                acc
            }
        }
    }
}

fn multilinear_weights(grid: &Grid, x: &[f64]) -> Vec<(usize, f64)> {
    let n = grid.dim();
    let mut base = vec![0usize; n];
    let mut frac = vec![0.0; n];
    for k in 0..n {
        let m = grid.shape[k];
        let s = ((x[k] - grid.lo[k]) / grid.h[k]).clamp(0.0, (m - 1) as f64);
        let i = (s.floor() as usize).min(m - 2);
        base[k] = i;
        frac[k] = s - i as f64;
    }
    let mut out = Vec::with_capacity(1 << n);
    let mut idx = vec![0usize; n];
    for corner in 0..(1usize << n) {
        let mut w = 1.0;
        for k in 0..n {
            let hi = corner >> k & 1 == 1;
            idx[k] = base[k] + hi as usize;
            w *= if hi { frac[k] } else { 1.0 - frac[k] };
        }
        if w != 0.0 {
            out.push((grid.flat_index(&idx), w));
        }
    }
    out
}

/// Cell solves for the problem: one if the chart metric is constant,
/// otherwise on a `samples^n` grid over the chart box.
pub fn effective_coefficients(p: &ProblemSpec, samples: usize, n_y: usize, tol: f64) -> Result<EffectiveCoefficients> {
    let metric = p.chart_metric();
    let c = p.chart();
    if metric.is_constant() {
        let pts = effective_field(&p.coefficient, &metric, &[c.lo.clone()], n_y, tol)?;
        return Ok(EffectiveCoefficients::Constant(pts.into_iter().next().expect("one point")));
    }
    let grid = Grid::with_points(&c.lo, &c.hi, &vec![samples.max(2); p.dim()])?;
    let points = effective_field(&p.coefficient, &metric, &grid.points(), n_y, tol)?;
    Ok(EffectiveCoefficients::Sampled { grid, points })
}

/// Solve `−div_M(B ∇_M u) + c u = f` on `grid` (a vertex grid of the chart box).
pub fn solve_homogenized(p: &ProblemSpec, coeffs: &EffectiveCoefficients, grid: &Grid, opts: SolverOptions) -> Result<SolveResult> {
    let metric = p.chart_metric();
    let ms = MetricSamples::new(&metric, grid)?;
    let n = grid.dim();
    let mut k = Vec::with_capacity(grid.len() * n * n);
    let mut worst = 0.0f64;
    for i in 0..grid.len() {
        let gi = DMatrix::from_row_slice(n, n, ms.g_inv_at(i));
        let kt = coeffs.flux_tensor(&grid.point(i), &gi, ms.sqrt_det[i]);
        let scale = kt.amax().max(f64::MIN_POSITIVE);
        worst = worst.max((&kt - kt.transpose()).amax() / scale);
        let sym = (&kt + kt.transpose()) * 0.5;
        for a in 0..n {
            for b in 0..n {
                k.push(sym[(a, b)]);
            }
        }
    }
    if worst > 1e-8 {
        return Err(Error::NotSpd(format!(
            "homogenized flux tensor asymmetric ({worst:e}); the effective tensor is not symmetric"
        )));
    }
    let f = GridFunction::from_field(&p.chart().id, grid.clone(), BoundaryKind::Free, &p.chart_source())?;
    solve_dirichlet(&p.chart().id, grid, &k, &ms, p.reaction, &f.values, opts)
}

/// `û(x, y) = Σ_i w_i(x, y) (∇_M u(x))^i` on (macro node, cell node).
#[derive(Debug, Clone)]
pub struct Corrector {
    pub grid: Grid,
    pub n_y: usize,
    pub cell_edge: Vec<f64>,
    /// Macro-node-major, cell nodes row-major inside.
    pub values: Vec<f64>,
}

impl Corrector {
    pub fn y_len(&self) -> usize {
        self.n_y.pow(self.grid.dim() as u32)
    }

    pub fn at(&self, node: usize) -> &[f64] {
        let m = self.y_len();
        &self.values[node * m..(node + 1) * m]
    }

    /// `û(x, {x/eps})`, periodic multilinear lookup in `y`.
    pub fn oscillating(&self, eps: f64, chart_id: &str) -> Result<GridFunction> {
        let n = self.grid.dim();
        let vals = (0..self.grid.len())
            .map(|i| {
                let x = self.grid.point(i);
                let cell = self.at(i);
                let mut base = vec![0usize; n];
                let mut frac = vec![0.0; n];
                for k in 0..n {
                    let hy = self.cell_edge[k] / self.n_y as f64;
                    let mut s = ((x[k] / eps).rem_euclid(self.cell_edge[k])) / hy;
                    if (s - s.round()).abs() < 1e-9 {
                        s = s.round();
                    }
                    let b = s.floor() as usize % self.n_y;
                    base[k] = b;
                    frac[k] = s - s.floor();
                }
                let mut acc = 0.0;
                for corner in 0..(1usize << n) {
                    let mut w = 1.0;
                    let mut flat = 0;
                    for k in 0..n {
                        let hi = corner >> k & 1 == 1;
                        w *= if hi { frac[k] } else { 1.0 - frac[k] };
                        flat = flat * self.n_y + if hi { (base[k] + 1) % self.n_y } else { base[k] };
                    }
                    if w != 0.0 {
                        acc += w * cell[flat];
                    }
                }
                acc
            })
            .collect();
        GridFunction::from_values(chart_id, self.grid.clone(), BoundaryKind::Free, vals)
    }
}

pub fn reconstruct_corrector(u: &GridFunction, coeffs: &EffectiveCoefficients, metric: &MetricField) -> Result<Corrector> {
    let pts = coeffs.points();
    if pts.is_empty() {
        return Err(Error::Config("corrector needs cell solutions".into()));
    }
    let ms = MetricSamples::new(metric, &u.grid)?;
    let grad = grad_with(u, &ms)?;
    let n = u.grid.dim();
    let sol0 = &pts[0].solution;
    let n_y = sol0.problem.n_y();
    let m = n_y.pow(n as u32);
    let mut values = vec![0.0; u.grid.len() * m];
    values.par_chunks_mut(m).enumerate().for_each(|(node, out)| {
        let x = u.grid.point(node);
        let du = grad.at(node);
        for (s, wgt) in coeffs.weights(&x) {
            let sol = &pts[s].solution;
            for i in 0..n {
                let c = wgt * du[i];
                if c != 0.0 {
                    for (o, w) in out.iter_mut().zip(&sol.w[i].values) {
                        *o += c * w;
                    }
                }
            }
        }
    });
    Ok(Corrector {
        grid: u.grid.clone(),
        n_y,
        cell_edge: sol0.problem.cell_edge.clone(),
        values,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StudyOptions {
    pub cells_per_eps: usize,
    /// Cell resolution for the reference tensor and the corrector.
    pub n_y: usize,
    /// Sample points per axis for x-dependent metrics.
    pub macro_samples: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub l2_err: f64,
    pub unfolded_l2_err: f64,
    pub corrector_h1_err: f64,
    pub ucm_residual: f64,
    pub iterations: usize,
    pub seconds: f64,
    pub u_l2: f64,
    pub grad_l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendFlags {
    pub l2_decreasing: bool,
    pub unfolded_decreasing: bool,
    pub corrector_decreasing: bool,
    pub ucm_decreasing: bool,
}

#[derive(Debug, Clone)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub flags: TrendFlags,
    pub apriori_bound: f64,
    pub b_tilde: DMatrix<f64>,
}

fn strictly_decreasing(v: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = v.collect();
    v.windows(2).all(|w| w[1] < w[0])
}

/// `‖T(u^eps) − u‖_{L²(M×Y)}` over the full cells.
fn unfolded_error(ueps: &GridFunction, u: &GridFunction, ms: &MetricSamples, cfg: &UnfoldConfig) -> Result<f64> {
    let t = unfold_local(ueps, cfg)?;
    let lattice = cfg.lattice(&u.grid)?;
    let n = u.grid.dim();
    let nc = cfg.cells_per_eps;
    let m = cfg.y_len();
    let hv = u.grid.cell_volume();
    let dy = cfg.cell_volume() / m as f64;
    let mut acc = 0.0;
    let mut xi = vec![0usize; n];
    for (ci, b) in t.cells.iter().enumerate() {
        let tv = t.cell_values(ci);
        for xf in 0..m {
            let mut rem = xf;
            for k in (0..n).rev() {
                xi[k] = rem % nc;
                rem /= nc;
            }
            let node = lattice.grid_index(&u.grid, nc, b, &xi);
            let ux = u.values[node];
            let s: f64 = tv.iter().map(|v| (v - ux) * (v - ux)).sum();
            acc += s * dy * ms.sqrt_det[node] * hv;
        }
    }
    Ok(acc.sqrt())
}

/// Rows for a strictly decreasing list of eps; the reference `u` is the
/// homogenized solution on each fine grid.
pub fn convergence_study(p: &ProblemSpec, eps_list: &[f64], opts: StudyOptions) -> Result<ConvergenceTable> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("eps list must be non-empty and strictly decreasing".into()));
    }
    let coeffs = effective_coefficients(p, opts.macro_samples, opts.n_y, opts.tol.min(CELL_TOL))?;
    let metric = p.chart_metric();
    let sopts = SolverOptions { tol: opts.tol };
    let rows = eps_list
        .par_iter()
        .map(|&eps| -> Result<ConvergenceRow> {
            let start = Instant::now();
            let fine = solve_fine(p, eps, opts.cells_per_eps, sopts)?;
            let grid = fine.result.u.grid.clone();
            let ms = MetricSamples::new(&metric, &grid)?;
            let hom = solve_homogenized(p, &coeffs, &grid, sopts)?;
            let ueps = &fine.result.u;
            let u = &hom.u;
            let diff = ueps.zip_with(u, |a, b| a - b)?;
            let l2_err = norms_with(&diff, &ms)?.l2;
            let unfolded_l2_err = unfolded_error(ueps, u, &ms, &fine.cfg)?;
            let corr = reconstruct_corrector(u, &coeffs, &metric)?.oscillating(eps, &p.chart().id)?;
            let e = diff.zip_with(&corr, |a, c| a - eps * c)?;
            let corrector_h1_err = norms_with(&e, &ms)?.h1_semi;
            let grad = grad_with(ueps, &ms)?;
            let n = grid.dim();
            let integrand: Vec<f64> = (0..grid.len())
                .map(|i| {
                    let g = ms.g_at(i);
                    let v = grad.at(i);
                    let mut s = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            s += g[a * n + b] * v[a] * v[b];
                        }
                    }
                    fine.d_eps[i] * s
                })
                .collect();
            let energy = GridFunction::from_values(&p.chart().id, grid.clone(), BoundaryKind::Free, integrand)?;
            let ucm = ucm_residual(&energy, &metric, &fine.cfg)?;
            let un = norms_with(ueps, &ms)?;
            Ok(ConvergenceRow {
                eps,
                l2_err,
                unfolded_l2_err,
                corrector_h1_err,
                ucm_residual: ucm.residual,
                iterations: fine.result.iterations,
                seconds: start.elapsed().as_secs_f64(),
                u_l2: un.l2,
                grad_l2: un.h1_semi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flags = TrendFlags {
        l2_decreasing: strictly_decreasing(rows.iter().map(|r| r.l2_err)),
        unfolded_decreasing: strictly_decreasing(rows.iter().map(|r| r.unfolded_l2_err)),
        corrector_decreasing: strictly_decreasing(rows.iter().map(|r| r.corrector_h1_err)),
        ucm_decreasing: strictly_decreasing(rows.iter().map(|r| r.ucm_residual)),
    };
    let (coarse, _) = fine_grid(p, eps_list[0], opts.cells_per_eps)?;
    let apriori_bound = apriori_bound(p, &coarse)?;
    let b_tilde = coeffs.b_tilde_at(&p.chart().lo);
    Ok(ConvergenceTable {
        rows,
        flags,
        apriori_bound,
        b_tilde,
    })
}

/// `C` with `‖u‖_{L²} + ‖∇_M u‖_{L²} <= C` for every admissible `D`, from
/// coercivity `d0`, the reaction `c`, `‖f‖_{L²}` and the Dirichlet Poincaré
/// constant of the box (smallest eigenvalue of the discrete Laplacian on
/// `grid`, which lies below the continuous one).
pub fn apriori_bound(p: &ProblemSpec, grid: &Grid) -> Result<f64> {
    let metric = p.chart_metric();
    let ms = MetricSamples::new(&metric, grid)?;
    let f = GridFunction::from_field(&p.chart().id, grid.clone(), BoundaryKind::Free, &p.chart_source())?;
    let f_l2 = norms_with(&f, &ms)?.l2;
    let (smin, smax) = ms.sqrt_det_range();
    let lambda1: f64 = (0..grid.dim())
        .map(|k| {
            let len = grid.h[k] * (grid.shape[k] - 1) as f64;
            let s = (std::f64::consts::PI * grid.h[k] / (2.0 * len)).sin();
            4.0 / (grid.h[k] * grid.h[k]) * s * s
        })
        .sum();
    let kappa = (smax / smin) * ms.max_eig / lambda1;
    let d0 = p.coefficient.d0;
    let coercive = d0 / kappa + p.reaction;
    Ok(f_l2 * (1.0 / coercive + 1.0 / (d0 * coercive).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Axis;
    use std::f64::consts::PI;

    fn unit_problem(n: usize, d: CoefficientField, c: f64, f: &str) -> ProblemSpec {
        let chart = Chart::translated("m", vec![0.0; n], vec![1.0; n], vec![0.0; n]).unwrap();
        ProblemSpec::new(
            Atlas::single(chart).unwrap(),
            MetricField::identity(n),
            d,
            c,
            ScalarField::parse(f, Axis::X).unwrap(),
        )
        .unwrap()
    }

    fn sin_coef() -> CoefficientField {
        CoefficientField::new(ScalarField::parse("2 + sin(2*pi*y1)", Axis::Y).unwrap(), vec![1.0], 1.0, 3.0).unwrap()
    }

    fn max_err(u: &GridFunction, exact: impl Fn(f64) -> f64) -> f64 {
        (0..u.grid.len())
            .map(|i| (u.values[i] - exact(u.grid.point(i)[0])).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn poisson_manufactured() {
        let p = unit_problem(1, CoefficientField::constant(1.0, 1).unwrap(), 0.0, "pi*pi*sin(pi*x1)");
        let r = solve_fine(&p, 1.0 / 16.0, 16, SolverOptions::default()).unwrap();
        assert!(max_err(&r.result.u, |x| (PI * x).sin()) < 1e-4);
        assert!(r.result.residual <= 1e-10);
        assert!((r.result.energy - r.result.load).abs() <= 1e-9 * r.result.load.abs());
    }

    #[test]
    fn reaction_manufactured() {
        let p = unit_problem(1, CoefficientField::constant(1.0, 1).unwrap(), 1.0, "1");
        let r = solve_fine(&p, 1.0 / 16.0, 16, SolverOptions::default()).unwrap();
        let exact = |x: f64| 1.0 - (x - 0.5).cosh() / 0.5f64.cosh();
        assert!(max_err(&r.result.u, exact) < 1e-4);
        assert!(r.result.u.values.iter().all(|v| *v >= -1e-10));
    }

    #[test]
    fn zero_source_gives_zero() {
        let p = unit_problem(2, sin_coef2(), 0.0, "0");
        let r = solve_fine(&p, 0.25, 8, SolverOptions::default()).unwrap();
        assert!(r.result.u.values.iter().all(|v| *v == 0.0));
    }

    fn sin_coef2() -> CoefficientField {
        CoefficientField::new(ScalarField::parse("2 + sin(2*pi*y1)", Axis::Y).unwrap(), vec![1.0, 1.0], 1.0, 3.0).unwrap()
    }

    #[test]
    fn misaligned_eps_is_rejected() {
        let p = unit_problem(1, sin_coef(), 0.0, "1");
        assert!(matches!(solve_fine(&p, 0.3, 8, SolverOptions::default()), Err(Error::Alignment { .. })));
        assert!(solve_fine(&p, 0.25, 4, SolverOptions::default()).is_err());
    }

    #[test]
    fn homogenized_one_dimensional() {
        let p = unit_problem(1, sin_coef(), 0.0, "1");
        let coeffs = effective_coefficients(&p, 2, 256, CELL_TOL).unwrap();
        let grid = Grid::for_box(&[0.0], &[1.0], &[1.0 / 256.0]).unwrap();
        let r = solve_homogenized(&p, &coeffs, &grid, SolverOptions::default()).unwrap();
        let s3 = 3f64.sqrt();
        assert!(max_err(&r.u, |x| (x - x * x) / (2.0 * s3)) < 1e-4);
    }

    #[test]
    fn homogenized_identity_matches_fine_poisson() {
        let p = unit_problem(2, CoefficientField::constant(1.0, 2).unwrap(), 0.0, "sin(pi*x1)*x2");
        let fine = solve_fine(&p, 0.25, 8, SolverOptions { tol: 1e-13 }).unwrap();
        let hom = solve_homogenized(
            &p,
            &EffectiveCoefficients::Mixed(DMatrix::identity(2, 2)),
            &fine.result.u.grid,
            SolverOptions { tol: 1e-13 },
        )
        .unwrap();
        let gap = fine.result.u.zip_with(&hom.u, |a, b| a - b).unwrap().max_abs();
        assert!(gap <= 1e-12, "{gap}");

        let b = 2.5;
        let scaled = solve_homogenized(
            &p,
            &EffectiveCoefficients::Mixed(DMatrix::identity(2, 2) * b),
            &fine.result.u.grid,
            SolverOptions { tol: 1e-13 },
        )
        .unwrap();
        let gap = scaled.u.zip_with(&hom.u, |a, c| a - c / b).unwrap().max_abs();
        assert!(gap <= 1e-10, "{gap}");
    }

    #[test]
    fn asymmetric_tensor_is_flagged() {
        let p = unit_problem(2, CoefficientField::constant(1.0, 2).unwrap(), 0.0, "1");
        let grid = Grid::for_box(&[0.0, 0.0], &[1.0, 1.0], &[0.125, 0.125]).unwrap();
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            solve_homogenized(&p, &EffectiveCoefficients::Mixed(b), &grid, SolverOptions::default()),
            Err(Error::NotSpd(_))
        ));
    }

    #[test]
    fn corrector_cases() {
        let p = unit_problem(1, sin_coef(), 0.0, "1");
        let coeffs = effective_coefficients(&p, 2, 16, CELL_TOL).unwrap();
        let grid = Grid::for_box(&[0.0], &[1.0], &[1.0 / 128.0]).unwrap();
        let u = solve_homogenized(&p, &coeffs, &grid, SolverOptions::default()).unwrap().u;
        let metric = p.chart_metric();
        let c = reconstruct_corrector(&u, &coeffs, &metric).unwrap();
        let w = &coeffs.points()[0].solution.w[0].values;
        let du = crate::fieldgrid::grad_m(&u, &metric).unwrap();
        for node in [3, 40, 100] {
            let cell = c.at(node);
            assert!(cell.iter().sum::<f64>().abs() < 1e-12);
            for (j, v) in cell.iter().enumerate() {
                assert!((v - w[j] * du.components[0].values[node]).abs() < 1e-15);
            }
        }
        let flat = GridFunction::constant("m", grid.clone(), 2.0);
        let c = reconstruct_corrector(&flat, &coeffs, &metric).unwrap();
        assert!(c.values.iter().all(|v| v.abs() < 1e-12));

        let pc = unit_problem(1, CoefficientField::constant(2.0, 1).unwrap(), 0.0, "1");
        let cc = effective_coefficients(&pc, 2, 16, CELL_TOL).unwrap();
        let c = reconstruct_corrector(&u, &cc, &metric).unwrap();
        assert!(c.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_coefficient_has_no_eps_dependence() {
        let p = unit_problem(1, CoefficientField::constant(1.5, 1).unwrap(), 0.0, "sin(3*x1) + 1");
        let t = convergence_study(
            &p,
            &[0.125, 0.0625],
            StudyOptions { cells_per_eps: 16, n_y: 16, macro_samples: 2, tol: 1e-10 },
        )
        .unwrap();
        for r in &t.rows {
            assert!(r.l2_err < 1e-7 && r.corrector_h1_err < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn x_dependent_metric_homogenized_is_symmetric_and_converges() {
        let chart = Chart::translated("m", vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let metric = MetricField::from_rows(vec![
            vec![ScalarField::parse("1 + x1*x1/2", Axis::X).unwrap(), ScalarField::constant(0.0)],
            vec![ScalarField::constant(0.0), ScalarField::constant(1.0)],
        ])
        .unwrap();
        let p = ProblemSpec::new(
            Atlas::single(chart).unwrap(),
            metric,
            sin_coef2(),
            0.0,
            ScalarField::constant(1.0),
        )
        .unwrap();
        let coeffs = effective_coefficients(&p, 5, 16, CELL_TOL).unwrap();
        assert_eq!(coeffs.points().len(), 25);
        let grid = Grid::for_box(&[0.0, 0.0], &[1.0, 1.0], &[1.0 / 32.0, 1.0 / 32.0]).unwrap();
        let r = solve_homogenized(&p, &coeffs, &grid, SolverOptions::default()).unwrap();
        assert!(r.residual <= 1e-10);
        assert!(r.u.values.iter().all(|v| *v >= -1e-10));
    }

    #[test]
    fn apriori_bound_holds() {
        let p = unit_problem(1, sin_coef(), 0.0, "1");
        let (grid, _) = fine_grid(&p, 0.125, 16).unwrap();
        let c = apriori_bound(&p, &grid).unwrap();
        let r = solve_fine(&p, 0.125, 16, SolverOptions::default()).unwrap();
        let ms = MetricSamples::new(&p.chart_metric(), &grid).unwrap();
        let nm = norms_with(&r.result.u, &ms).unwrap();
        assert!(nm.l2 + nm.h1_semi <= c);
    }
}
