//! Discrete periodic unfolding.
//!
//! With `h = eps * L / N_c` the eps-cells are exact blocks of `N_c` grid points
//! per axis, so `T^eps(f)(b, j) = f[b * N_c + j]` is a gather. Cells that are
//! not entirely inside the chart box are excluded and reported.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fieldgrid::{fmt17, grad_with, Basis, BoundaryKind, Grid, GridFunction, GridVectorField, MetricSamples};
use crate::geometry::{validate_uc, Atlas, MetricField, ScalarField};

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldConfig {
    pub eps: f64,
    /// Y-grid points per axis, `N_c = eps * L / h`.
    pub cells_per_eps: usize,
    pub cell_edge: Vec<f64>,
}

impl UnfoldConfig {
    pub fn new(eps: f64, cells_per_eps: usize, cell_edge: Vec<f64>) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        if cells_per_eps < 1 {
            return Err(Error::Config("cells_per_eps must be positive".into()));
        }
        if cell_edge.iter().any(|l| !(*l > 0.0)) || cell_edge.is_empty() {
            return Err(Error::Config("cell edges must be positive".into()));
        }
        Ok(UnfoldConfig {
            eps,
            cells_per_eps,
            cell_edge,
        })
    }

    pub fn dim(&self) -> usize {
        self.cell_edge.len()
    }

    /// Grid spacing matching this configuration.
    pub fn h(&self) -> Vec<f64> {
        self.cell_edge
            .iter()
            .map(|l| self.eps * l / self.cells_per_eps as f64)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_edge.iter().product()
    }

    pub fn y_len(&self) -> usize {
        self.cells_per_eps.pow(self.dim() as u32)
    }

    /// Locate the eps-lattice on `grid` and classify cells.
    pub fn lattice(&self, grid: &Grid) -> Result<CellLattice> {
        let n = self.dim();
        if grid.dim() != n {
            return Err(Error::Dimension {
                expected: n,
                got: grid.dim(),
            });
        }
        let nc = self.cells_per_eps as i64;
        let mut lo_index = Vec::with_capacity(n);
        let mut ranges = Vec::with_capacity(n);
        for (k, h) in self.h().into_iter().enumerate() {
            if (grid.h[k] - h).abs() > 1e-9 * h {
                return Err(Error::Alignment {
                    axis: k,
                    reason: format!("grid spacing {} differs from eps*L/N_c = {h}", grid.h[k]),
                });
            }
            let q = grid.lo[k] / h;
            if (q - q.round()).abs() > 1e-9 * q.abs().max(1.0) {
                return Err(Error::Alignment {
                    axis: k,
                    reason: format!("grid origin {} is not on the eps-lattice", grid.lo[k]),
                });
            }
            let lo = q.round() as i64;
            let hi = lo + grid.shape[k] as i64 - 1;
            lo_index.push(lo);
            ranges.push((lo, hi));
        }
        let mut full = Vec::new();
        let mut excluded = Vec::new();
        let first: Vec<i64> = ranges.iter().map(|(lo, _)| lo.div_euclid(nc)).collect();
        let last: Vec<i64> = ranges.iter().map(|(_, hi)| (hi - 1).div_euclid(nc)).collect();
        let counts: Vec<usize> = (0..n).map(|k| (last[k] - first[k] + 1).max(0) as usize).collect();
        let total: usize = counts.iter().product();
        let mut b = vec![0i64; n];
        for flat in 0..total {
            let mut rem = flat;
            for k in (0..n).rev() {
                b[k] = first[k] + (rem % counts[k]) as i64;
                rem /= counts[k];
            }
            let inside = (0..n).all(|k| b[k] * nc >= ranges[k].0 && (b[k] + 1) * nc <= ranges[k].1);
            if inside {
                full.push(b.clone());
            } else {
                excluded.push(b.clone());
            }
        }
        Ok(CellLattice {
            lo_index,
            full,
            excluded,
        })
    }

    /// Lattice for a grid function, honouring periodic sampling.
    pub fn lattice_for(&self, f: &GridFunction) -> Result<CellLattice> {
        if f.boundary != BoundaryKind::Periodic {
            return self.lattice(&f.grid);
        }
        // A periodic grid omits the seam point; classify against the
        // equivalent vertex grid.
        let mut shape = f.grid.shape.clone();
        shape.iter_mut().for_each(|s| *s += 1);
        let vertex = Grid::new(f.grid.lo.clone(), f.grid.h.clone(), shape)?;
        self.lattice(&vertex)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellLattice {
    /// Global lattice index of the grid origin per axis.
    pub lo_index: Vec<i64>,
    pub full: Vec<Vec<i64>>,
    pub excluded: Vec<Vec<i64>>,
}

impl CellLattice {
    /// Flat grid index of point `j` of cell `b`.
    pub fn grid_index(&self, grid: &Grid, nc: usize, b: &[i64], j: &[usize]) -> usize {
        let mut flat = 0;
        for k in 0..grid.dim() {
            let i = (b[k] * nc as i64 + j[k] as i64 - self.lo_index[k]) as usize;
            flat = flat * grid.shape[k] + i;
        }
        flat
    }
}

fn y_index(mut flat: usize, nc: usize, n: usize, out: &mut [usize]) {
    for k in (0..n).rev() {
        out[k] = flat % nc;
        flat /= nc;
    }
}

/// Values of `T^eps(f)` indexed by (full cell, y-point).
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedField {
    pub eps: f64,
    pub cells_per_eps: usize,
    pub cell_edge: Vec<f64>,
    pub cells: Vec<Vec<i64>>,
    /// `cells.len() * N_c^n`, cell-major then y row-major.
    pub values: Vec<f64>,
    pub excluded_cells: Vec<Vec<i64>>,
}

impl UnfoldedField {
    pub fn dim(&self) -> usize {
        self.cell_edge.len()
    }

    pub fn y_len(&self) -> usize {
        self.cells_per_eps.pow(self.dim() as u32)
    }

    pub fn value(&self, cell: usize, j: usize) -> f64 {
        self.values[cell * self.y_len() + j]
    }

    pub fn cell_values(&self, cell: usize) -> &[f64] {
        let m = self.y_len();
        &self.values[cell * m..(cell + 1) * m]
    }

    /// `y = j / N_c` in the rescaled unit cell.
    pub fn y_unit(&self, j: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        y_index(j, self.cells_per_eps, self.dim(), &mut idx);
        idx.iter().map(|i| *i as f64 / self.cells_per_eps as f64).collect()
    }

    /// Chart coordinates of the lower corner of cell `b`.
    pub fn anchor(&self, b: &[i64]) -> Vec<f64> {
        b.iter()
            .zip(&self.cell_edge)
            .map(|(b, l)| self.eps * l * *b as f64)
            .collect()
    }

    fn same_layout(&self, other: &UnfoldedField) -> bool {
        self.cells == other.cells && self.cells_per_eps == other.cells_per_eps
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &UnfoldedField, b: f64) -> Result<UnfoldedField> {
        if !self.same_layout(other) {
            return Err(Error::Config("unfolded fields have different layouts".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(UnfoldedField {
            values,
            ..self.clone()
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Columns `b1..bn, j1..jn, value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=n).map(|k| format!("b{k}")).collect();
        header.extend((1..=n).map(|k| format!("j{k}")));
        header.push("value".into());
        w.write_record(&header)?;
        let mut jdx = vec![0; n];
        for (ci, b) in self.cells.iter().enumerate() {
            for j in 0..self.y_len() {
                y_index(j, self.cells_per_eps, n, &mut jdx);
                let mut row: Vec<String> = b.iter().map(|v| v.to_string()).collect();
                row.extend(jdx.iter().map(|v| v.to_string()));
                row.push(fmt17(self.value(ci, j)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn gather(values: &[f64], grid: &Grid, lattice: &CellLattice, cfg: &UnfoldConfig) -> Vec<f64> {
    let n = grid.dim();
    let nc = cfg.cells_per_eps;
    let m = cfg.y_len();
    lattice
        .full
        .par_iter()
        .flat_map_iter(|b| {
            let mut j = vec![0; n];
            (0..m)
                .map(|flat| {
                    y_index(flat, nc, n, &mut j);
                    values[lattice.grid_index(grid, nc, b, &j)]
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn unfold_values(values: &[f64], grid: &Grid, lattice: &CellLattice, cfg: &UnfoldConfig) -> UnfoldedField {
    UnfoldedField {
        eps: cfg.eps,
        cells_per_eps: cfg.cells_per_eps,
        cell_edge: cfg.cell_edge.clone(),
        cells: lattice.full.clone(),
        values: gather(values, grid, lattice, cfg),
        excluded_cells: lattice.excluded.clone(),
    }
}

/// `T^eps(f)` for a function sampled on its chart's grid.
pub fn unfold_local(f: &GridFunction, cfg: &UnfoldConfig) -> Result<UnfoldedField> {
    let lattice = cfg.lattice_for(f)?;
    Ok(unfold_values(&f.values, &f.grid, &lattice, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedVectorField {
    pub components: Vec<UnfoldedField>,
    pub basis: Basis,
}

/// Component-wise unfolding, re-tagged onto the cell basis.
pub fn unfold_vector(v: &GridVectorField, cfg: &UnfoldConfig) -> Result<UnfoldedVectorField> {
    if v.components.len() != cfg.dim() {
        return Err(Error::Dimension {
            expected: cfg.dim(),
            got: v.components.len(),
        });
    }
    let components = v
        .components
        .iter()
        .map(|c| unfold_local(c, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(UnfoldedVectorField {
        components,
        basis: Basis::Cell,
    })
}

/// `g_Y^{(x,eps)}` per (cell, y) and its cell-anchor limit `g_Y^{(x)}`.
#[derive(Debug, Clone)]
pub struct UnfoldedMetric {
    pub n: usize,
    /// `entries[i*n + j]` is `T(g_ij)`.
    pub entries: Vec<UnfoldedField>,
    pub inverse: Vec<UnfoldedField>,
    pub sqrt_det: UnfoldedField,
    /// `g(anchor of cell)` per full cell.
    pub limit: Vec<DMatrix<f64>>,
}

impl UnfoldedMetric {
    pub fn at(&self, cell: usize, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |a, b| self.entries[a * self.n + b].value(cell, j))
    }
}

pub fn unfold_metric(metric: &MetricField, grid: &Grid, cfg: &UnfoldConfig) -> Result<UnfoldedMetric> {
    let ms = MetricSamples::new(metric, grid)?;
    let lattice = cfg.lattice(grid)?;
    unfold_metric_with(&ms, grid, &lattice, cfg)
}

fn unfold_metric_with(ms: &MetricSamples, grid: &Grid, lattice: &CellLattice, cfg: &UnfoldConfig) -> Result<UnfoldedMetric> {
    let n = ms.n;
    let comp = |src: &[f64], a: usize| -> Vec<f64> { (0..grid.len()).map(|p| src[p * n * n + a]).collect() };
    let entries: Vec<UnfoldedField> = (0..n * n)
        .map(|a| unfold_values(&comp(&ms.g, a), grid, lattice, cfg))
        .collect();
    let inverse: Vec<UnfoldedField> = (0..n * n)
        .map(|a| unfold_values(&comp(&ms.g_inv, a), grid, lattice, cfg))
        .collect();
    let sqrt_det = unfold_values(&ms.sqrt_det, grid, lattice, cfg);
    let zero = vec![0; n];
    let limit = lattice
        .full
        .iter()
        .map(|b| ms.g_matrix(lattice.grid_index(grid, cfg.cells_per_eps, b, &zero)))
        .collect();
    Ok(UnfoldedMetric {
        n,
        entries,
        inverse,
        sqrt_det,
        limit,
    })
}

/// Maximum discrepancy of an exchange identity, split by stencil type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeReport {
    /// Over y-points whose difference stencils stay inside the cell.
    pub interior: f64,
    /// Over y-points on the cell boundary (one-sided stencils in y).
    pub boundary: f64,
    /// Magnitude of the compared quantity, `max |lhs|`.
    pub scale: f64,
}

impl ExchangeReport {
    pub fn relative_interior(&self) -> f64 {
        if self.scale > 0.0 {
            self.interior / self.scale
        } else {
            self.interior
        }
    }
}

/// Difference quotient along `axis` of per-cell values on the y-grid with
/// spacing `hy`; returns the derivative and whether the stencil was central.
fn y_partial(vals: &[f64], nc: usize, n: usize, axis: usize, hy: f64, j: &[usize]) -> f64 {
    let stride = nc.pow((n - 1 - axis) as u32);
    let base: usize = j.iter().fold(0, |acc, i| acc * nc + i);
    let i = j[axis];
    let at = |t: usize| vals[base - i * stride + t * stride];
    if i > 0 && i + 1 < nc {
        (at(i + 1) - at(i - 1)) / (2.0 * hy)
    } else if nc < 3 {
        if i == 0 {
            (at(1) - at(0)) / hy
        } else {
            (at(i) - at(i - 1)) / hy
        }
    } else if i == 0 {
        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * hy)
    } else {
        (3.0 * at(nc - 1) - 4.0 * at(nc - 2) + at(nc - 3)) / (2.0 * hy)
    }
}

fn interior_y(j: &[usize], nc: usize) -> bool {
    j.iter().all(|&i| i > 0 && i + 1 < nc)
}

fn accumulate(report: &mut ExchangeReport, interior: bool, lhs: f64, rhs: f64) {
    let d = (lhs - rhs).abs();
    report.scale = report.scale.max(lhs.abs());
    if interior {
        report.interior = report.interior.max(d);
    } else {
        report.boundary = report.boundary.max(d);
    }
}

/// Compare `eps T(∇_M f)` with `∇_Y^{(x,eps)} T(f)`.
pub fn check_gradient_exchange(f: &GridFunction, metric: &MetricField, cfg: &UnfoldConfig) -> Result<ExchangeReport> {
    let ms = MetricSamples::new(metric, &f.grid)?;
    let lattice = cfg.lattice_for(f)?;
    let n = cfg.dim();
    let nc = cfg.cells_per_eps;
    let hy: Vec<f64> = cfg.cell_edge.iter().map(|l| l / nc as f64).collect();
    let grad = grad_with(f, &ms)?;
    let lhs: Vec<UnfoldedField> = grad
        .components
        .iter()
        .map(|c| unfold_values(&c.values, &f.grid, &lattice, cfg))
        .collect();
    let tf = unfold_values(&f.values, &f.grid, &lattice, cfg);
    let um = unfold_metric_with(&ms, &f.grid, &lattice, cfg)?;
    let mut report = ExchangeReport {
        interior: 0.0,
        boundary: 0.0,
        scale: 0.0,
    };
    let mut j = vec![0; n];
    for ci in 0..tf.cells.len() {
        let vals = tf.cell_values(ci);
        for flat in 0..cfg.y_len() {
            y_index(flat, nc, n, &mut j);
            let dy: Vec<f64> = (0..n).map(|a| y_partial(vals, nc, n, a, hy[a], &j)).collect();
            for k in 0..n {
                let rhs: f64 = (0..n).map(|a| um.inverse[k * n + a].value(ci, flat) * dy[a]).sum();
                accumulate(&mut report, interior_y(&j, nc), cfg.eps * lhs[k].value(ci, flat), rhs);
            }
        }
    }
    Ok(report)
}

/// Compare `eps T(div_M V)` with `div_Y^{(x,eps)} T(V)_Y`.
pub fn check_divergence_exchange(v: &GridVectorField, metric: &MetricField, cfg: &UnfoldConfig) -> Result<ExchangeReport> {
    let first = &v.components[0];
    let ms = MetricSamples::new(metric, &first.grid)?;
    let div = crate::fieldgrid::div_with(v, &ms)?;
    let lattice = cfg.lattice_for(first)?;
    let n = cfg.dim();
    let nc = cfg.cells_per_eps;
    let hy: Vec<f64> = cfg.cell_edge.iter().map(|l| l / nc as f64).collect();
    let lhs = unfold_values(&div.values, &first.grid, &lattice, cfg);
    let tv = unfold_vector(v, cfg)?;
    let tsg = unfold_values(&ms.sqrt_det, &first.grid, &lattice, cfg);
    let mut report = ExchangeReport {
        interior: 0.0,
        boundary: 0.0,
        scale: 0.0,
    };
    let mut j = vec![0; n];
    for ci in 0..lhs.cells.len() {
        let flux: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                tv.components[k]
                    .cell_values(ci)
                    .iter()
                    .zip(tsg.cell_values(ci))
                    .map(|(a, s)| a * s)
                    .collect()
            })
            .collect();
        for flat in 0..cfg.y_len() {
            y_index(flat, nc, n, &mut j);
            let sum: f64 = (0..n).map(|k| y_partial(&flux[k], nc, n, k, hy[k], &j)).sum();
            let rhs = sum / tsg.value(ci, flat);
            accumulate(&mut report, interior_y(&j, nc), cfg.eps * lhs.value(ci, flat), rhs);
        }
    }
    Ok(report)
}

/// Compare `T(g_M(F, G))` with `g_Y^{(x,eps)}(T(F)_Y, T(G)_Y)`; returns the
/// maximum absolute discrepancy and the magnitude of the compared values.
pub fn check_metric_exchange(
    f: &GridVectorField,
    g: &GridVectorField,
    metric: &MetricField,
    cfg: &UnfoldConfig,
) -> Result<(f64, f64)> {
    let grid = f.grid();
    let n = cfg.dim();
    let ms = MetricSamples::new(metric, grid)?;
    let lattice = cfg.lattice_for(&f.components[0])?;
    let pair = |gij: &[f64], a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..n {
                s += gij[i * n + k] * a[i] * b[k];
            }
        }
        s
    };
    let lhs_vals: Vec<f64> = (0..grid.len()).map(|p| pair(ms.g_at(p), &f.at(p), &g.at(p))).collect();
    let lhs = unfold_values(&lhs_vals, grid, &lattice, cfg);
    let tf = unfold_vector(f, cfg)?;
    let tg = unfold_vector(g, cfg)?;
    let um = unfold_metric_with(&ms, grid, &lattice, cfg)?;
    let mut gap = 0.0f64;
    let mut scale = 0.0f64;
    let mut gij = vec![0.0; n * n];
    for ci in 0..lhs.cells.len() {
        for j in 0..cfg.y_len() {
            for (a, e) in gij.iter_mut().enumerate() {
                *e = um.entries[a].value(ci, j);
            }
            let a: Vec<f64> = tf.components.iter().map(|c| c.value(ci, j)).collect();
            let b: Vec<f64> = tg.components.iter().map(|c| c.value(ci, j)).collect();
            let rhs = pair(&gij, &a, &b);
            gap = gap.max((lhs.value(ci, j) - rhs).abs());
            scale = scale.max(lhs.value(ci, j).abs());
        }
    }
    Ok((gap, scale))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormP {
    One,
    Two,
    Inf,
}

impl NormP {
    fn exponent(self) -> Option<f64> {
        match self {
            NormP::One => Some(1.0),
            NormP::Two => Some(2.0),
            NormP::Inf => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRatio {
    /// `None` when `f = 0`.
    pub ratio: Option<f64>,
    pub bound: f64,
}

impl NormRatio {
    pub fn within_bound(&self) -> bool {
        self.ratio.map_or(true, |r| r <= self.bound)
    }
}

/// Left-point (lower-corner) weights: every grid point owns the grid cell
/// above it, so exact eps-tilings give the same point set as the unfolded sum.
fn left_point_owned(grid: &Grid, boundary: BoundaryKind, flat: usize) -> bool {
    if boundary == BoundaryKind::Periodic {
        return true;
    }
    let mut rem = flat;
    for k in (0..grid.dim()).rev() {
        let i = rem % grid.shape[k];
        rem /= grid.shape[k];
        if i + 1 == grid.shape[k] {
            return false;
        }
    }
    true
}

/// `‖T(f)‖_{L^p(M×Y)} / ‖f‖_{L^p(M)}` with a bound from the extremes of `√|G|`.
pub fn norm_ratio(f: &GridFunction, metric: &MetricField, cfg: &UnfoldConfig, p: NormP) -> Result<NormRatio> {
    let ms = MetricSamples::new(metric, &f.grid)?;
    let lattice = cfg.lattice_for(f)?;
    let (smin, smax) = ms.sqrt_det_range();
    let ybar = cfg.cell_volume();
    let bound = match p.exponent() {
        Some(e) => (smax / smin).powf(1.0 / e) * ybar.powf(1.0 / e) * 1.05,
        None => 1.05,
    };
    let tf = unfold_values(&f.values, &f.grid, &lattice, cfg);
    let hv = f.grid.cell_volume();
    let (num, den) = match p.exponent() {
        Some(e) => {
            let den: f64 = (0..f.grid.len())
                .filter(|&i| left_point_owned(&f.grid, f.boundary, i))
                .map(|i| f.values[i].abs().powf(e) * ms.sqrt_det[i] * hv)
                .sum();
            let tsg = unfold_values(&ms.sqrt_det, &f.grid, &lattice, cfg);
            let m = cfg.y_len() as f64;
            let mut num = 0.0;
            for ci in 0..tf.cells.len() {
                let vol: f64 = tsg.cell_values(ci).iter().sum::<f64>() * hv;
                let mean: f64 = tf.cell_values(ci).iter().map(|v| v.abs().powf(e)).sum::<f64>() / m;
                num += vol * mean * ybar;
            }
            (num.powf(1.0 / e), den.powf(1.0 / e))
        }
        None => (tf.max_abs(), f.max_abs()),
    };
    Ok(NormRatio {
        ratio: if den > 0.0 { Some(num / den) } else { None },
        bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcmReport {
    /// `∫_M f dvol_M` (left-point rule).
    pub integral: f64,
    /// `(1/|Y|) ∫∫ T(f) T(√|G|)` over full cells.
    pub unfolded: f64,
    pub residual: f64,
    /// `‖f‖_{L¹(M)}` with the same rule.
    pub l1: f64,
}

fn ucm_parts(values: &[f64], grid: &Grid, boundary: BoundaryKind, ms: &MetricSamples, lattice: &CellLattice, cfg: &UnfoldConfig) -> UcmReport {
    let hv = grid.cell_volume();
    let mut integral = 0.0;
    let mut l1 = 0.0;
    for i in 0..grid.len() {
        if left_point_owned(grid, boundary, i) {
            integral += values[i] * ms.sqrt_det[i] * hv;
            l1 += values[i].abs() * ms.sqrt_det[i] * hv;
        }
    }
    let tf = unfold_values(values, grid, lattice, cfg);
    let tsg = unfold_values(&ms.sqrt_det, grid, lattice, cfg);
    // ε^n |Y| / N_c^n per sample equals the grid cell volume.
    let unfolded: f64 = tf.values.iter().zip(&tsg.values).map(|(a, s)| a * s * hv).sum();
    UcmReport {
        integral,
        unfolded,
        residual: (integral - unfolded).abs(),
        l1,
    }
}

/// UCM residual of a single-chart grid function.
pub fn ucm_residual(f: &GridFunction, metric: &MetricField, cfg: &UnfoldConfig) -> Result<UcmReport> {
    let ms = MetricSamples::new(metric, &f.grid)?;
    let lattice = cfg.lattice_for(f)?;
    Ok(ucm_parts(&f.values, &f.grid, f.boundary, &ms, &lattice, cfg))
}

/// Chart-image grid of chart `alpha` matching `cfg`.
pub fn chart_grid(atlas: &Atlas, alpha: usize, cfg: &UnfoldConfig) -> Result<Grid> {
    let c = &atlas.charts[alpha];
    let grid = Grid::for_box(&c.lo, &c.hi, &cfg.h())?;
    cfg.lattice(&grid)?;
    Ok(grid)
}

/// UCM residual over an atlas: per chart with integrand `π_α f`, summed.
/// `f` and `metric` are given in parameter coordinates.
pub fn ucm_residual_atlas(f: &ScalarField, metric: &MetricField, atlas: &Atlas, cfg: &UnfoldConfig) -> Result<UcmReport> {
    validate_uc(atlas, cfg.eps)?.into_result()?;
    let mut total = UcmReport {
        integral: 0.0,
        unfolded: 0.0,
        residual: 0.0,
        l1: 0.0,
    };
    for (alpha, chart) in atlas.charts.iter().enumerate() {
        let grid = chart_grid(atlas, alpha, cfg)?;
        let local_metric = crate::geometry::Pushforward::pushforward(metric, chart.map());
        let ms = MetricSamples::new(&local_metric, &grid)?;
        let values = (0..grid.len())
            .map(|i| {
                let p = chart.to_param(&grid.point(i));
                Ok(atlas.weight(alpha, &p)? * f.eval(&p)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        let lattice = cfg.lattice(&grid)?;
        let part = ucm_parts(&values, &grid, BoundaryKind::Free, &ms, &lattice, cfg);
        total.integral += part.integral;
        total.unfolded += part.unfolded;
        total.l1 += part.l1;
    }
    total.residual = (total.integral - total.unfolded).abs();
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct GlobalUnfolding {
    /// Keyed by the cell lattice of the first chart.
    pub field: UnfoldedField,
    pub per_chart: Vec<UnfoldedField>,
    /// Largest disagreement between chart unfoldings on shared cells.
    pub overlap_gap: f64,
    /// Number of (cell, y) samples seen by more than one chart.
    pub overlap_samples: usize,
}

/// Partition-weighted combination of the chart unfoldings of `f`
/// (parameter coordinates).
pub fn unfold_global(f: &ScalarField, atlas: &Atlas, cfg: &UnfoldConfig) -> Result<GlobalUnfolding> {
    validate_uc(atlas, cfg.eps)?.into_result()?;
    let n = atlas.dim();
    let base = atlas.charts[0].offset().to_vec();
    let mut per_chart = Vec::with_capacity(atlas.charts.len());
    let mut shifts = Vec::with_capacity(atlas.charts.len());
    for (alpha, chart) in atlas.charts.iter().enumerate() {
        let grid = chart_grid(atlas, alpha, cfg)?;
        let values = (0..grid.len())
            .map(|i| f.eval(&chart.to_param(&grid.point(i))))
            .collect::<Result<Vec<f64>>>()?;
        let gf = GridFunction::from_values(chart.id.clone(), grid, BoundaryKind::Free, values)?;
        per_chart.push(unfold_local(&gf, cfg)?);
        let mut k = Vec::with_capacity(n);
        for axis in 0..n {
            let step = cfg.eps * cfg.cell_edge[axis];
            let q = (chart.offset()[axis] - base[axis]) / step;
            if (q - q.round()).abs() > 1e-9 {
                return Err(Error::UcViolation {
                    eps: cfg.eps,
                    violations: vec![format!(
                        "chart `{}` is not an eps-lattice translate of `{}`",
                        chart.id, atlas.charts[0].id
                    )],
                });
            }
            k.push(q.round() as i64);
        }
        shifts.push(k);
    }

    let mut owners: BTreeMap<Vec<i64>, Vec<(usize, usize)>> = BTreeMap::new();
    for (alpha, u) in per_chart.iter().enumerate() {
        for (ci, b) in u.cells.iter().enumerate() {
            let key: Vec<i64> = b.iter().zip(&shifts[alpha]).map(|(b, k)| b - k).collect();
            owners.entry(key).or_default().push((alpha, ci));
        }
    }

    let m = cfg.y_len();
    let mut cells = Vec::with_capacity(owners.len());
    let mut values = Vec::with_capacity(owners.len() * m);
    let mut overlap_gap = 0.0f64;
    let mut overlap_samples = 0;
    for (key, list) in &owners {
        cells.push(key.clone());
        for j in 0..m {
            let y = per_chart[0].y_unit(j);
            let mut wsum = 0.0;
            let mut acc = 0.0;
            let mut plain = 0.0;
            for &(alpha, ci) in list {
                let u = &per_chart[alpha];
                let b = &u.cells[ci];
                let x: Vec<f64> = (0..n)
                    .map(|a| cfg.eps * cfg.cell_edge[a] * (b[a] as f64 + y[a]))
                    .collect();
                let p = atlas.charts[alpha].to_param(&x);
                let w = atlas.weight(alpha, &p)?;
                let v = u.value(ci, j);
                wsum += w;
                acc += w * v;
                plain += v;
            }
            if list.len() > 1 {
                overlap_samples += 1;
                let first = per_chart[list[0].0].value(list[0].1, j);
                for &(alpha, ci) in &list[1..] {
                    overlap_gap = overlap_gap.max((per_chart[alpha].value(ci, j) - first).abs());
                }
            }
            values.push(if wsum > 0.0 { acc / wsum } else { plain / list.len() as f64 });
        }
    }
    let excluded: Vec<Vec<i64>> = per_chart
        .iter()
        .enumerate()
        .flat_map(|(alpha, u)| {
            let k = &shifts[alpha];
            u.excluded_cells
                .iter()
                .map(move |b| b.iter().zip(k).map(|(b, k)| b - k).collect::<Vec<i64>>())
        })
        .filter(|key| !owners.contains_key(key))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(GlobalUnfolding {
        field: UnfoldedField {
            eps: cfg.eps,
            cells_per_eps: cfg.cells_per_eps,
            cell_edge: cfg.cell_edge.clone(),
            cells,
            values,
            excluded_cells: excluded,
        },
        per_chart,
        overlap_gap,
        overlap_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Axis;
    use crate::geometry::Chart;
    use std::f64::consts::PI;

    fn grid1(lo: f64, hi: f64, cfg: &UnfoldConfig) -> Grid {
        Grid::for_box(&[lo], &[hi], &cfg.h()).unwrap()
    }

    #[test]
    fn constant_and_identity_gathers() {
        let cfg = UnfoldConfig::new(0.25, 8, vec![1.0]).unwrap();
        let g = grid1(0.0, 1.0, &cfg);
        let three = GridFunction::constant("c", g.clone(), 3.0);
        let t = unfold_local(&three, &cfg).unwrap();
        assert_eq!(t.cells.len(), 4);
        assert!(t.values.iter().all(|v| *v == 3.0));

        let x = GridFunction::sample("c", g, BoundaryKind::Free, |p| p[0]).unwrap();
        let t = unfold_local(&x, &cfg).unwrap();
        for (ci, b) in t.cells.iter().enumerate() {
            for j in 0..8 {
                let expect = 0.25 * b[0] as f64 + 0.25 * t.y_unit(j)[0];
                assert!((t.value(ci, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn oscillating_coefficient_unfolds_to_cell_function() {
        let d = |y: f64| 2.0 + (2.0 * PI * y).sin();
        let cfg = UnfoldConfig::new(0.125, 16, vec![1.0]).unwrap();
        let g = grid1(0.0, 1.0, &cfg);
        let f = GridFunction::sample("c", g, BoundaryKind::Free, |p| {
            let k = (p[0] / (0.125 / 16.0)).round() as i64;
            d(k.rem_euclid(16) as f64 / 16.0)
        })
        .unwrap();
        let t = unfold_local(&f, &cfg).unwrap();
        for ci in 0..t.cells.len() {
            for j in 0..16 {
                assert_eq!(t.value(ci, j), d(j as f64 / 16.0));
            }
        }
    }

    #[test]
    fn misalignment_names_axis() {
        let cfg = UnfoldConfig::new(0.25, 8, vec![1.0, 1.0]).unwrap();
        let g = Grid::for_box(&[0.0, 0.0], &[1.0, 1.0], &[1.0 / 32.0, 1.0 / 20.0]).unwrap();
        match cfg.lattice(&g) {
            Err(Error::Alignment { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("{other:?}"),
        }
        let g = Grid::for_box(&[0.01], &[1.01], &[1.0 / 32.0]);
        assert!(g.is_err() || cfg.lattice(&g.unwrap()).is_err());
    }

    #[test]
    fn partial_cells_are_excluded() {
        let cfg = UnfoldConfig::new(0.25, 20, vec![1.0]).unwrap();
        let g = grid1(0.0, 0.9, &cfg);
        let t = unfold_local(&GridFunction::constant("c", g, 1.0), &cfg).unwrap();
        assert_eq!(t.cells, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(t.excluded_cells, vec![vec![3]]);
    }

    #[test]
    fn unfolding_is_linear() {
        let cfg = UnfoldConfig::new(0.25, 4, vec![1.0, 1.0]).unwrap();
        let g = Grid::for_box(&[0.0, 0.0], &[1.0, 1.0], &cfg.h()).unwrap();
        let a = GridFunction::sample("c", g.clone(), BoundaryKind::Free, |p| p[0] * p[1]).unwrap();
        let b = GridFunction::sample("c", g, BoundaryKind::Free, |p| (p[0] - p[1]).cos()).unwrap();
        let ab = a.zip_with(&b, |x, y| 2.0 * x - 3.0 * y).unwrap();
        let lhs = unfold_local(&ab, &cfg).unwrap();
        let rhs = unfold_local(&a, &cfg).unwrap().combine(2.0, &unfold_local(&b, &cfg).unwrap(), -3.0).unwrap();
        assert_eq!(lhs.values, rhs.values);
    }

    #[test]
    fn ucm_examples() {
        let id = MetricField::identity(1);
        let cfg = UnfoldConfig::new(0.25, 16, vec![1.0]).unwrap();
        let f = GridFunction::sample("c", grid1(0.0, 1.0, &cfg), BoundaryKind::Free, |p| (5.0 * p[0]).exp() - 2.0).unwrap();
        let r = ucm_residual(&f, &id, &cfg).unwrap();
        assert!(r.residual <= 1e-12 * r.l1);

        let cfg = UnfoldConfig::new(0.25, 20, vec![1.0]).unwrap();
        let one = GridFunction::constant("c", grid1(0.0, 0.9, &cfg), 1.0);
        let r = ucm_residual(&one, &id, &cfg).unwrap();
        assert!((r.residual - 0.15).abs() <= 1e-12, "{}", r.residual);
    }

    #[test]
    fn ucm_residual_shrinks() {
        let id = MetricField::identity(1);
        let h = 1.0 / 800.0;
        let mut last = f64::INFINITY;
        for &eps in &[0.125f64, 0.0625, 0.03125] {
            let nc = (eps / h).round() as usize;
            let cfg = UnfoldConfig::new(eps, nc, vec![1.0]).unwrap();
            let r = ucm_residual(&GridFunction::constant("c", grid1(0.0, 0.99, &cfg), 1.0), &id, &cfg).unwrap();
            assert!(r.residual <= last + 1e-12);
            // boundary layer: at most one cell thick
            assert!(r.residual <= eps + 1e-12);
            last = r.residual;
        }
    }

    #[test]
    fn norm_ratio_cases() {
        let cfg = UnfoldConfig::new(0.25, 8, vec![1.0, 1.0]).unwrap();
        let g = Grid::for_box(&[0.0, 0.0], &[1.0, 1.0], &cfg.h()).unwrap();
        let f = GridFunction::sample("c", g.clone(), BoundaryKind::Free, |p| (3.0 * p[0]).sin() + p[1]).unwrap();
        let id = MetricField::identity(2);
        for p in [NormP::One, NormP::Two] {
            let r = norm_ratio(&f, &id, &cfg, p).unwrap();
            assert!((r.ratio.unwrap() - 1.0).abs() < 1e-12);
        }
        let r = norm_ratio(&f, &id, &cfg, NormP::Inf).unwrap();
        assert!(r.ratio.unwrap() <= 1.0 + 1e-12);
        let r = norm_ratio(&f, &MetricField::diagonal(&[4.0, 1.0]).unwrap(), &cfg, NormP::Two).unwrap();
        assert!(r.within_bound());
        let zero = GridFunction::constant("c", g, 0.0);
        assert_eq!(norm_ratio(&zero, &id, &cfg, NormP::Two).unwrap().ratio, None);
    }

    #[test]
    fn metric_unfolding() {
        let cfg = UnfoldConfig::new(0.125, 8, vec![1.0]).unwrap();
        let g = grid1(0.0, 1.0, &cfg);
        let c = unfold_metric(&MetricField::diagonal(&[2.5]).unwrap(), &g, &cfg).unwrap();
        for ci in 0..c.limit.len() {
            for j in 0..8 {
                assert_eq!(c.at(ci, j), c.limit[ci]);
            }
        }
        let metric = MetricField::from_rows(vec![vec![ScalarField::parse("1 + x1*x1/2", Axis::X).unwrap()]]).unwrap();
        let u = unfold_metric(&metric, &g, &cfg).unwrap();
        let mut worst = 0.0f64;
        for (ci, b) in u.entries[0].cells.iter().enumerate() {
            for j in 0..8 {
                let x = 0.125 * (b[0] as f64 + j as f64 / 8.0);
                assert!((u.entries[0].value(ci, j) - (1.0 + x * x / 2.0)).abs() < 1e-15);
                worst = worst.max((u.at(ci, j) - &u.limit[ci]).amax());
            }
        }
        // Lip(g) = 1 on [0, 1]
        assert!(worst <= 1.0 * 0.125);
    }

    #[test]
    fn exchange_identities_are_exact_inside_cells() {
        let cfg = UnfoldConfig::new(0.125, 16, vec![1.0]).unwrap();
        let g = grid1(0.0, 1.0, &cfg);
        let f = GridFunction::sample("c", g.clone(), BoundaryKind::Free, |p| (2.0 * PI * p[0]).sin()).unwrap();
        let id = MetricField::identity(1);
        let r = check_gradient_exchange(&f, &id, &cfg).unwrap();
        assert!(r.interior <= 1e-12 * r.scale, "{r:?}");

        let lin = GridFunction::sample("c", g, BoundaryKind::Free, |p| 3.0 * p[0] + 1.0).unwrap();
        let r = check_gradient_exchange(&lin, &id, &cfg).unwrap();
        assert!(r.interior <= 1e-12 * r.scale && r.boundary <= 1e-12 * r.scale);

        let cfg2 = UnfoldConfig::new(0.25, 8, vec![1.0, 1.0]).unwrap();
        let g2 = Grid::for_box(&[0.0, 0.0], &[1.0, 1.0], &cfg2.h()).unwrap();
        let metric = MetricField::from_rows(vec![
            vec![ScalarField::parse("2 + x1*x2", Axis::X).unwrap(), ScalarField::constant(0.3)],
            vec![ScalarField::constant(0.3), ScalarField::parse("1 + x1", Axis::X).unwrap()],
        ])
        .unwrap();
        let f = GridFunction::sample("c", g2, BoundaryKind::Free, |p| (p[0] * 3.0).sin() * (p[1] * 2.0).cos()).unwrap();
        let r = check_gradient_exchange(&f, &metric, &cfg2).unwrap();
        assert!(r.interior <= 1e-12 * r.scale, "{r:?}");
        let v = crate::fieldgrid::grad_m(&f, &metric).unwrap();
        let r = check_divergence_exchange(&v, &metric, &cfg2).unwrap();
        assert!(r.interior <= 1e-12 * r.scale, "{r:?}");
        let (gap, scale) = check_metric_exchange(&v, &v, &metric, &cfg2).unwrap();
        assert!(gap <= 1e-12 * scale);
    }

    fn two_chart_atlas() -> Atlas {
        // parameter domains [0, 0.6] and [0.4, 1.0]
        let a = Chart::translated("a", vec![0.0], vec![0.6], vec![0.0]).unwrap();
        let b = Chart::translated("b", vec![1.15], vec![1.75], vec![0.75]).unwrap();
        Atlas::new(vec![a, b], vec![1.0]).unwrap()
    }

    #[test]
    fn global_unfolding_agrees_on_overlaps() {
        let atlas = two_chart_atlas();
        let cfg = UnfoldConfig::new(0.05, 8, vec![1.0]).unwrap();
        let f = ScalarField::parse("sin(7*x1) + x1*x1", Axis::X).unwrap();
        let gu = unfold_global(&f, &atlas, &cfg).unwrap();
        assert!(gu.overlap_samples > 0);
        assert!(gu.overlap_gap <= 1e-13, "{}", gu.overlap_gap);

        let five = ScalarField::constant(5.0);
        let weighted = Atlas::with_partition(
            atlas.charts.clone(),
            vec![
                ScalarField::from_fn(|p: &[f64]| if p[0] < 0.4 { 1.0 } else if p[0] > 0.6 { 0.0 } else { 0.3 }),
                ScalarField::from_fn(|p: &[f64]| if p[0] < 0.4 { 0.0 } else if p[0] > 0.6 { 1.0 } else { 0.7 }),
            ],
            vec![1.0],
        )
        .unwrap();
        let gu = unfold_global(&five, &weighted, &cfg).unwrap();
        assert!(gu.field.values.iter().all(|v| (v - 5.0).abs() < 1e-15));

        let bad = UnfoldConfig::new(0.4, 8, vec![1.0]).unwrap();
        assert!(matches!(unfold_global(&f, &atlas, &bad), Err(Error::UcViolation { .. })));
    }

    #[test]
    fn single_chart_global_matches_local() {
        let chart = Chart::translated("a", vec![0.0], vec![1.0], vec![0.0]).unwrap();
        let atlas = Atlas::single(chart).unwrap();
        let cfg = UnfoldConfig::new(0.125, 8, vec![1.0]).unwrap();
        let f = ScalarField::parse("exp(x1)", Axis::X).unwrap();
        let global = unfold_global(&f, &atlas, &cfg).unwrap();
        let local = unfold_local(&GridFunction::from_field("a", grid1(0.0, 1.0, &cfg), BoundaryKind::Free, &f).unwrap(), &cfg).unwrap();
        assert_eq!(global.field.values, local.values);
        assert_eq!(global.field.cells, local.cells);
    }
}
