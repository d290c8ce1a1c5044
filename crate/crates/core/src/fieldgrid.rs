//! Uniform vertex-centered grids on chart images and the finite-difference
//! metric calculus on them.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{MetricField, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    /// Values on the box boundary are a Dirichlet trace.
    Dirichlet,
    /// Index `shape[k]` wraps to `0`; the seam point is not stored.
    Periodic,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// Components on `∂/∂x^i`.
    Manifold,
    /// Components on `∂/∂y^i`.
    Cell,
}

/// Point `i` on axis `k` sits at `lo[k] + i * h[k]`, `0 <= i < shape[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub h: Vec<f64>,
    pub shape: Vec<usize>,
}

fn integral_count(len: f64, h: f64, axis: usize) -> Result<usize> {
    let q = len / h;
    let r = q.round();
    if !(r >= 1.0) || (q - r).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::Alignment {
            axis,
            reason: format!("box length {len} is not a multiple of h = {h}"),
        });
    }
    Ok(r as usize)
}

impl Grid {
    pub fn new(lo: Vec<f64>, h: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n = lo.len();
        if h.len() != n || shape.len() != n || n == 0 {
            return Err(Error::Config("grid axes are inconsistent".into()));
        }
        if shape.iter().any(|&s| s < 2) {
            return Err(Error::Config(format!("grid needs at least 2 points per axis, got {shape:?}")));
        }
        if h.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("grid spacing must be positive, got {h:?}")));
        }
        Ok(Grid { lo, h, shape })
    }

    /// Vertex grid including both box ends.
    pub fn for_box(lo: &[f64], hi: &[f64], h: &[f64]) -> Result<Self> {
        let shape = (0..lo.len())
            .map(|k| integral_count(hi[k] - lo[k], h[k], k).map(|c| c + 1))
            .collect::<Result<Vec<_>>>()?;
        Self::new(lo.to_vec(), h.to_vec(), shape)
    }

    /// Grid of the half-open periodic box `[lo, hi)`.
    pub fn for_periodic_box(lo: &[f64], hi: &[f64], h: &[f64]) -> Result<Self> {
        let shape = (0..lo.len())
            .map(|k| integral_count(hi[k] - lo[k], h[k], k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(lo.to_vec(), h.to_vec(), shape)
    }

    /// Vertex grid with `points[k]` points spanning `[lo, hi]`.
    pub fn with_points(lo: &[f64], hi: &[f64], points: &[usize]) -> Result<Self> {
        let h = (0..lo.len())
            .map(|k| (hi[k] - lo[k]) / (points[k].max(2) - 1) as f64)
            .collect();
        Self::new(lo.to_vec(), h, points.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one grid cell, `Π h_k`.
    pub fn cell_volume(&self) -> f64 {
        self.h.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let n = self.dim();
        let mut s = vec![1; n];
        for k in (0..n.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.shape[k + 1];
        }
        s
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for k in (0..self.dim()).rev() {
            out[k] = flat % self.shape[k];
            flat /= self.shape[k];
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (i, s)| acc * s + i)
    }

    pub fn point_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for k in (0..self.dim()).rev() {
            let i = rem % self.shape[k];
            rem /= self.shape[k];
            out[k] = self.lo[k] + i as f64 * self.h[k];
        }
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(flat, &mut p);
        p
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    fn on_boundary(&self, flat: usize) -> bool {
        let mut rem = flat;
        for k in (0..self.dim()).rev() {
            let i = rem % self.shape[k];
            rem /= self.shape[k];
            if i == 0 || i + 1 == self.shape[k] {
                return true;
            }
        }
        false
    }

    /// Composite quadrature weights (without `√|G|`).
    pub fn quadrature_weights(&self, boundary: BoundaryKind) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        (0..self.len())
            .map(|flat| {
                self.multi_index(flat, &mut idx);
                let mut w = 1.0;
                for k in 0..self.dim() {
                    let end = idx[k] == 0 || idx[k] + 1 == self.shape[k];
                    w *= if boundary != BoundaryKind::Periodic && end {
                        0.5 * self.h[k]
                    } else {
                        self.h[k]
                    };
                }
                w
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub chart_id: String,
    pub grid: Grid,
    pub values: Vec<f64>,
    pub boundary: BoundaryKind,
}

impl GridFunction {
    pub fn from_values(chart_id: impl Into<String>, grid: Grid, boundary: BoundaryKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Geometry {
                point: grid.point(i),
                reason: "non-finite grid value".into(),
            });
        }
        Ok(GridFunction {
            chart_id: chart_id.into(),
            grid,
            values,
            boundary,
        })
    }

    pub fn constant(chart_id: impl Into<String>, grid: Grid, v: f64) -> Self {
        let values = vec![v; grid.len()];
        GridFunction {
            chart_id: chart_id.into(),
            grid,
            values,
            boundary: BoundaryKind::Free,
        }
    }

    pub fn sample<F>(chart_id: impl Into<String>, grid: Grid, boundary: BoundaryKind, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let values: Vec<f64> = (0..grid.len()).into_par_iter().map(|i| f(&grid.point(i))).collect();
        Self::from_values(chart_id, grid, boundary, values)
    }

    pub fn from_field(chart_id: impl Into<String>, grid: Grid, boundary: BoundaryKind, field: &ScalarField) -> Result<Self> {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|i| field.eval(&grid.point(i)))
            .collect::<Result<Vec<f64>>>()?;
        Self::from_values(chart_id, grid, boundary, values)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.chart_id.clone(), self.grid.clone(), self.boundary, values)
    }

    /// Pointwise `op(self, other)` on a shared grid.
    pub fn zip_with(&self, other: &GridFunction, op: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::Config("grid functions live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| op(*a, *b)).collect();
        self.with_values(values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Header `x1,..,xn,value`, row-major, 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.grid.dim()).map(|k| format!("x{k}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        let mut p = vec![0.0; self.grid.dim()];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.point_into(i, &mut p);
            let mut row: Vec<String> = p.iter().map(|c| fmt17(*c)).collect();
            row.push(fmt17(*v));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridVectorField {
    pub components: Vec<GridFunction>,
    pub basis: Basis,
}

impl GridVectorField {
    pub fn grid(&self) -> &Grid {
        &self.components[0].grid
    }

    pub fn at(&self, flat: usize) -> Vec<f64> {
        self.components.iter().map(|c| c.values[flat]).collect()
    }
}

/// Metric coefficients sampled once per grid point.
#[derive(Debug, Clone)]
pub struct MetricSamples {
    pub n: usize,
    /// `n*n` per point, row-major.
    pub g: Vec<f64>,
    pub g_inv: Vec<f64>,
    pub sqrt_det: Vec<f64>,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl MetricSamples {
    pub fn new(metric: &MetricField, grid: &Grid) -> Result<Self> {
        let n = metric.dim();
        if n != grid.dim() {
            return Err(Error::Dimension {
                expected: grid.dim(),
                got: n,
            });
        }
        let samples = if metric.is_constant() {
            let s = metric.metric_at(&grid.lo)?;
            vec![s; grid.len()]
        } else {
            (0..grid.len())
                .into_par_iter()
                .map(|i| metric.metric_at(&grid.point(i)))
                .collect::<Result<Vec<_>>>()?
        };
        let mut out = MetricSamples {
            n,
            g: Vec::with_capacity(grid.len() * n * n),
            g_inv: Vec::with_capacity(grid.len() * n * n),
            sqrt_det: Vec::with_capacity(grid.len()),
            min_eig: f64::INFINITY,
            max_eig: 0.0,
        };
        for s in samples {
            // nalgebra is column-major; the samples are symmetric so the
            // slices coincide with row-major storage.
            out.g.extend_from_slice(s.g.as_slice());
            out.g_inv.extend_from_slice(s.g_inv.as_slice());
            out.sqrt_det.push(s.sqrt_det);
            out.min_eig = out.min_eig.min(s.min_eig);
            out.max_eig = out.max_eig.max(s.max_eig);
        }
        Ok(out)
    }

    pub fn g_at(&self, flat: usize) -> &[f64] {
        &self.g[flat * self.n * self.n..(flat + 1) * self.n * self.n]
    }

    pub fn g_inv_at(&self, flat: usize) -> &[f64] {
        &self.g_inv[flat * self.n * self.n..(flat + 1) * self.n * self.n]
    }

    pub fn g_matrix(&self, flat: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.g_at(flat))
    }

    pub fn sqrt_det_range(&self) -> (f64, f64) {
        self.sqrt_det
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)))
    }
}

/// Second-order difference quotient along `axis`.
pub fn partial(values: &[f64], grid: &Grid, axis: usize, boundary: BoundaryKind) -> Vec<f64> {
    let strides = grid.strides();
    let (m, st, h) = (grid.shape[axis], strides[axis], grid.h[axis]);
    let mut out = vec![0.0; values.len()];
    let mut idx = vec![0; grid.dim()];
    for (flat, o) in out.iter_mut().enumerate() {
        grid.multi_index(flat, &mut idx);
        let i = idx[axis];
        let at = |j: usize| values[flat - i * st + j * st];
        *o = if boundary == BoundaryKind::Periodic {
            (at((i + 1) % m) - at((i + m - 1) % m)) / (2.0 * h)
        } else if i > 0 && i + 1 < m {
            (at(i + 1) - at(i - 1)) / (2.0 * h)
        } else if m == 2 {
            (at(1) - at(0)) / h
        } else if i == 0 {
            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
        } else {
            (3.0 * at(m - 1) - 4.0 * at(m - 2) + at(m - 3)) / (2.0 * h)
        };
    }
    out
}

fn check_metric_dim(metric: &MetricField, grid: &Grid) -> Result<()> {
    if metric.dim() != grid.dim() {
        return Err(Error::Dimension {
            expected: grid.dim(),
            got: metric.dim(),
        });
    }
    Ok(())
}

/// `(∇_M f)^k = Σ_j g^{kj} ∂_j f`.
pub fn grad_m(f: &GridFunction, metric: &MetricField) -> Result<GridVectorField> {
    check_metric_dim(metric, &f.grid)?;
    let ms = MetricSamples::new(metric, &f.grid)?;
    grad_with(f, &ms)
}

pub fn grad_with(f: &GridFunction, ms: &MetricSamples) -> Result<GridVectorField> {
    let n = f.grid.dim();
    let d: Vec<Vec<f64>> = (0..n).map(|j| partial(&f.values, &f.grid, j, f.boundary)).collect();
    let components = (0..n)
        .map(|k| {
            let vals = (0..f.grid.len())
                .map(|p| {
                    let gi = ms.g_inv_at(p);
                    (0..n).map(|j| gi[k * n + j] * d[j][p]).sum()
                })
                .collect();
            f.with_values(vals)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridVectorField {
        components,
        basis: Basis::Manifold,
    })
}

/// `div_M V = |G|^{-1/2} Σ_k ∂_k(√|G| V^k)`.
pub fn div_m(v: &GridVectorField, metric: &MetricField) -> Result<GridFunction> {
    let grid = v.grid();
    check_metric_dim(metric, grid)?;
    let ms = MetricSamples::new(metric, grid)?;
    div_with(v, &ms)
}

pub fn div_with(v: &GridVectorField, ms: &MetricSamples) -> Result<GridFunction> {
    if v.basis != Basis::Manifold {
        return Err(Error::Config("div_M expects a field in the manifold basis".into()));
    }
    let first = &v.components[0];
    let grid = &first.grid;
    if v.components.len() != grid.dim() {
        return Err(Error::Dimension {
            expected: grid.dim(),
            got: v.components.len(),
        });
    }
    let mut acc = vec![0.0; grid.len()];
    for (k, comp) in v.components.iter().enumerate() {
        let flux: Vec<f64> = comp.values.iter().zip(&ms.sqrt_det).map(|(a, s)| a * s).collect();
        for (a, d) in acc.iter_mut().zip(partial(&flux, grid, k, first.boundary)) {
            *a += d;
        }
    }
    for (a, s) in acc.iter_mut().zip(&ms.sqrt_det) {
        *a /= s;
    }
    first.with_values(acc)
}

/// `∫ f dvol_M`: trapezoid for dirichlet/free fields, rectangle for periodic ones.
pub fn integrate_m(f: &GridFunction, metric: &MetricField) -> Result<f64> {
    check_metric_dim(metric, &f.grid)?;
    let ms = MetricSamples::new(metric, &f.grid)?;
    Ok(integrate_with(f, &ms))
}

pub fn integrate_with(f: &GridFunction, ms: &MetricSamples) -> f64 {
    f.grid
        .quadrature_weights(f.boundary)
        .iter()
        .zip(&f.values)
        .zip(&ms.sqrt_det)
        .map(|((w, v), s)| w * v * s)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub h1_semi: f64,
}

pub fn norms(f: &GridFunction, metric: &MetricField) -> Result<Norms> {
    check_metric_dim(metric, &f.grid)?;
    let ms = MetricSamples::new(metric, &f.grid)?;
    norms_with(f, &ms)
}

pub fn norms_with(f: &GridFunction, ms: &MetricSamples) -> Result<Norms> {
    let sq = f.with_values(f.values.iter().map(|v| v * v).collect())?;
    let grad = grad_with(f, ms)?;
    Ok(Norms {
        l2: integrate_with(&sq, ms).max(0.0).sqrt(),
        h1_semi: vector_l2_with(&grad, ms)?,
    })
}

/// `√∫ g_M(V, V) dvol_M`.
pub fn vector_l2(v: &GridVectorField, metric: &MetricField) -> Result<f64> {
    let ms = MetricSamples::new(metric, v.grid())?;
    vector_l2_with(v, &ms)
}

pub fn vector_l2_with(v: &GridVectorField, ms: &MetricSamples) -> Result<f64> {
    let n = v.components.len();
    let first = &v.components[0];
    let vals = (0..first.grid.len())
        .map(|p| {
            let g = ms.g_at(p);
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += g[i * n + j] * v.components[i].values[p] * v.components[j].values[p];
                }
            }
            s
        })
        .collect();
    Ok(integrate_with(&first.with_values(vals)?, ms).max(0.0).sqrt())
}

/// Interior points of a dirichlet grid (used to mask boundary traces).
pub fn is_boundary_point(grid: &Grid, flat: usize) -> bool {
    grid.on_boundary(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit(h: f64, n: usize) -> Grid {
        Grid::for_box(&vec![0.0; n], &vec![1.0; n], &vec![h; n]).unwrap()
    }

    fn sample(grid: &Grid, kind: BoundaryKind, f: impl Fn(&[f64]) -> f64 + Sync) -> GridFunction {
        GridFunction::sample("c", grid.clone(), kind, f).unwrap()
    }

    #[test]
    fn grad_of_linear_function() {
        let g = unit(0.1, 2);
        let f = sample(&g, BoundaryKind::Free, |x| x[0]);
        let v = grad_m(&f, &MetricField::identity(2)).unwrap();
        assert!(v.components[0].values.iter().all(|a| (a - 1.0).abs() <= 1e-12));
        assert!(v.components[1].values.iter().all(|a| a.abs() <= 1e-12));

        let v = grad_m(&f, &MetricField::diagonal(&[4.0, 1.0]).unwrap()).unwrap();
        assert!(v.components[0].values.iter().all(|a| (a - 0.25).abs() <= 1e-12));

        let f = sample(&g, BoundaryKind::Free, |x| 3.0 * x[0] - 2.0 * x[1] + 1.0);
        let gm = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let v = grad_m(&f, &MetricField::constant(&gm).unwrap()).unwrap();
        let expect = gm.try_inverse().unwrap() * nalgebra::DVector::from_vec(vec![3.0, -2.0]);
        for p in 0..g.len() {
            assert!((v.components[0].values[p] - expect[0]).abs() <= 1e-12);
            assert!((v.components[1].values[p] - expect[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn grad_of_sine() {
        let h = 1.0 / 256.0;
        let g = Grid::for_periodic_box(&[0.0], &[1.0], &[h]).unwrap();
        let f = sample(&g, BoundaryKind::Periodic, |x| (2.0 * PI * x[0]).sin());
        let v = grad_m(&f, &MetricField::identity(1)).unwrap();
        let err = (0..g.len())
            .map(|i| (v.components[0].values[i] - 2.0 * PI * (2.0 * PI * g.point(i)[0]).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn grad_order_under_refinement() {
        let err = |h: f64| {
            let g = unit(h, 1);
            let f = sample(&g, BoundaryKind::Free, |x| (1.3 * x[0]).exp());
            let v = grad_m(&f, &MetricField::identity(1)).unwrap();
            (0..g.len())
                .map(|i| (v.components[0].values[i] - 1.3 * (1.3 * g.point(i)[0]).exp()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(1.0 / 32.0) / err(1.0 / 64.0);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn divergence_cases() {
        let g = unit(0.125, 2);
        let mk = |f: &(dyn Fn(&[f64]) -> f64 + Sync)| sample(&g, BoundaryKind::Free, f);
        let v = GridVectorField {
            components: vec![mk(&|_| 1.5), mk(&|_| -0.5)],
            basis: Basis::Manifold,
        };
        let d = div_m(&v, &MetricField::diagonal(&[4.0, 1.0]).unwrap()).unwrap();
        assert!(d.max_abs() <= 1e-14);

        let v = GridVectorField {
            components: vec![mk(&|x| x[0]), mk(&|_| 0.0)],
            basis: Basis::Manifold,
        };
        let d = div_m(&v, &MetricField::identity(2)).unwrap();
        assert!(d.values.iter().all(|a| (a - 1.0).abs() <= 1e-12));

        let cell = GridVectorField {
            basis: Basis::Cell,
            ..v
        };
        assert!(div_m(&cell, &MetricField::identity(2)).is_err());
    }

    fn laplacian_error(h: f64) -> f64 {
        let g = Grid::for_periodic_box(&[0.0, 0.0], &[1.0, 1.0], &[h, h]).unwrap();
        let s = |x: &[f64]| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin();
        let f = sample(&g, BoundaryKind::Periodic, s);
        let metric = MetricField::identity(2);
        let lap = div_m(&grad_m(&f, &metric).unwrap(), &metric).unwrap();
        (0..g.len())
            .map(|i| (lap.values[i] + 8.0 * PI * PI * s(&g.point(i))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn laplacian_of_product_sine() {
        // Relative to max |Δf| = 8π².
        let err = laplacian_error(1.0 / 128.0);
        assert!(err / (8.0 * PI * PI) <= 2e-2, "{err}");
        let ratio = laplacian_error(1.0 / 32.0) / laplacian_error(1.0 / 64.0);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn integrals() {
        let g = unit(1.0 / 16.0, 2);
        let one = GridFunction::constant("c", g.clone(), 1.0);
        assert!((integrate_m(&one, &MetricField::identity(2)).unwrap() - 1.0).abs() < 1e-14);
        assert!((integrate_m(&one, &MetricField::diagonal(&[4.0, 1.0]).unwrap()).unwrap() - 2.0).abs() < 1e-14);

        let g = unit(1.0 / 256.0, 1);
        let f = sample(&g, BoundaryKind::Free, |x| (2.0 * PI * x[0]).sin().powi(2));
        assert!((integrate_m(&f, &MetricField::identity(1)).unwrap() - 0.5).abs() < 1e-6);

        let gp = Grid::for_periodic_box(&[0.0], &[1.0], &[0.25]).unwrap();
        let one = GridFunction {
            boundary: BoundaryKind::Periodic,
            ..GridFunction::constant("c", gp, 1.0)
        };
        assert_eq!(integrate_m(&one, &MetricField::identity(1)).unwrap(), 1.0);

        let f = sample(&g, BoundaryKind::Free, |x| (7.0 * x[0]).cos().abs());
        assert!(integrate_m(&f, &MetricField::identity(1)).unwrap() >= 0.0);
    }

    #[test]
    fn norm_examples() {
        let g = unit(1.0 / 256.0, 1);
        let id = MetricField::identity(1);
        let z = norms(&GridFunction::constant("c", g.clone(), 0.0), &id).unwrap();
        assert_eq!((z.l2, z.h1_semi), (0.0, 0.0));
        let one = norms(&GridFunction::constant("c", g.clone(), 1.0), &id).unwrap();
        assert!((one.l2 - 1.0).abs() < 1e-14 && one.h1_semi < 1e-12);
        let s = norms(&sample(&g, BoundaryKind::Dirichlet, |x| (PI * x[0]).sin()), &id).unwrap();
        assert!((s.l2 - 0.5f64.sqrt()).abs() < 1e-4);
        assert!((s.h1_semi - PI * 0.5f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn csv_export() {
        let g = Grid::for_box(&[0.0], &[1.0], &[0.5]).unwrap();
        let f = sample(&g, BoundaryKind::Free, |x| x[0] / 3.0);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,value");
        assert_eq!(lines.len(), 4);
        let v: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.5 / 3.0);
    }

    #[test]
    fn alignment_errors() {
        assert!(matches!(
            Grid::for_box(&[0.0], &[1.0], &[0.3]),
            Err(Error::Alignment { axis: 0, .. })
        ));
        assert!(Grid::new(vec![0.0], vec![0.1], vec![1]).is_err());
    }
}
