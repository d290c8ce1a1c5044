//! Charts, atlases and the function objects living on them.
//!
//! Chart maps are affine, `x = linear * p + offset`, acting on a shared
//! parameter domain. All curvature is carried by the metric coefficients
//! `g_ij`, which are given as functions of the parameter coordinates `p` and
//! pushed into chart coordinates on demand.

use std::fmt;
use std::io::Read;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::expr::{Axis, Env, Expr};
use crate::fieldgrid::{Basis, GridVectorField};

/// Minimum admissible eigenvalue of a metric sample.
pub const SPD_EPS: f64 = 1e-10;
/// Minimum admissible |det| of a chart or transform matrix.
pub const SINGULAR_EPS: f64 = 1e-12;

const MAX_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    shift: DVector<f64>,
}

impl AffineMap {
    pub fn new(matrix: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n || shift.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: shift.len().max(matrix.ncols()),
            });
        }
        if n == 0 || n > MAX_DIM {
            return Err(Error::Config(format!("unsupported dimension {n}")));
        }
        let det = matrix.determinant();
        if !(det.abs() > SINGULAR_EPS) {
            return Err(Error::Geometry {
                point: vec![],
                reason: format!("singular affine map (det = {det:e})"),
            });
        }
        let inverse = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Geometry {
                point: vec![],
                reason: "affine map not invertible".into(),
            })?;
        Ok(AffineMap {
            matrix,
            inverse,
            shift,
        })
    }

    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        Self::new(matrix, DVector::zeros(n))
    }

    pub fn identity(n: usize) -> Self {
        AffineMap {
            matrix: DMatrix::identity(n, n),
            inverse: DMatrix::identity(n, n),
            shift: DVector::zeros(n),
        }
    }

    /// `x -> s * x`.
    pub fn scaling(n: usize, s: f64) -> Result<Self> {
        Self::linear(DMatrix::identity(n, n) * s)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse_matrix(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn det(&self) -> f64 {
        self.matrix.determinant()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = self.shift[i];
            for j in 0..n {
                s += self.matrix[(i, j)] * x[j];
            }
            out[i] = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn inverse(&self) -> AffineMap {
        let shift = -(&self.inverse * &self.shift);
        AffineMap {
            matrix: self.inverse.clone(),
            inverse: self.matrix.clone(),
            shift,
        }
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &AffineMap) -> AffineMap {
        AffineMap {
            matrix: &self.matrix * &inner.matrix,
            inverse: &inner.inverse * &self.inverse,
            shift: &self.matrix * &inner.shift + &self.shift,
        }
    }
}

/// Regular sample grid with multilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub lo: Vec<f64>,
    pub h: Vec<f64>,
    pub shape: Vec<usize>,
    /// Row-major, last axis fastest.
    pub values: Vec<f64>,
    /// Periodic tables cover `[lo, lo + shape*h)` without a seam point.
    pub periodic: bool,
}

impl SampleTable {
    pub fn new(lo: Vec<f64>, h: Vec<f64>, shape: Vec<usize>, values: Vec<f64>, periodic: bool) -> Result<Self> {
        let n = lo.len();
        if h.len() != n || shape.len() != n || n == 0 || n > MAX_DIM {
            return Err(Error::Config("sample table axes are inconsistent".into()));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Config(format!(
                "sample table has {} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        if shape.iter().any(|&s| s < 2) || h.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("sample table needs >= 2 points and positive spacing per axis".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sample table contains non-finite values".into()));
        }
        Ok(SampleTable {
            lo,
            h,
            shape,
            values,
            periodic,
        })
    }

    /// Read `coord_1, ..., coord_n, value` rows (with a header line) of a
    /// complete regular grid in any row order.
    pub fn from_csv<R: Read>(reader: R, n: usize, periodic: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != n + 1 {
                return Err(Error::Config(format!("sample table row has {} columns, expected {}", rec.len(), n + 1)));
            }
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number `{s}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let mut axes: Vec<Vec<f64>> = vec![Vec::new(); n];
        for row in &rows {
            for (k, ax) in axes.iter_mut().enumerate() {
                ax.push(row[k]);
            }
        }
        let mut lo = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        let mut shape = Vec::with_capacity(n);
        for ax in axes.iter_mut() {
            ax.sort_by(|a, b| a.total_cmp(b));
            ax.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
            if ax.len() < 2 {
                return Err(Error::Config("sample table needs >= 2 distinct coordinates per axis".into()));
            }
            let step = (ax[ax.len() - 1] - ax[0]) / (ax.len() - 1) as f64;
            for (i, v) in ax.iter().enumerate() {
                if (ax[0] + i as f64 * step - v).abs() > 1e-9 * step.abs().max(1.0) {
                    return Err(Error::Config("sample table coordinates are not uniformly spaced".into()));
                }
            }
            lo.push(ax[0]);
            h.push(step);
            shape.push(ax.len());
        }
        if rows.len() != shape.iter().product::<usize>() {
            return Err(Error::Config("sample table is not a complete grid".into()));
        }
        let mut values = vec![f64::NAN; rows.len()];
        for row in &rows {
            let mut flat = 0;
            for k in 0..n {
                let i = ((row[k] - lo[k]) / h[k]).round() as usize;
                flat = flat * shape[k] + i;
            }
            values[flat] = row[n];
        }
        Self::new(lo, h, shape, values, periodic)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.lo.len();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        let mut next = [0usize; MAX_DIM];
        for k in 0..n {
            let s = (x[k] - self.lo[k]) / self.h[k];
            let m = self.shape[k];
            if self.periodic {
                let s = s.rem_euclid(m as f64);
                let i = (s.floor() as usize).min(m - 1);
                base[k] = i;
                frac[k] = s - i as f64;
                next[k] = (i + 1) % m;
            } else {
                let s = s.clamp(0.0, (m - 1) as f64);
                let i = (s.floor() as usize).min(m - 2);
                base[k] = i;
                frac[k] = s - i as f64;
                next[k] = i + 1;
            }
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..n {
                let hi = corner >> k & 1 == 1;
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
                flat = flat * self.shape[k] + if hi { next[k] } else { base[k] };
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ScalarSource {
    Const(f64),
    Expr { expr: Arc<Expr>, axis: Axis },
    Func(ScalarFn),
    Table(Arc<SampleTable>),
}

impl fmt::Debug for ScalarSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarSource::Const(v) => write!(f, "Const({v})"),
            ScalarSource::Expr { expr, axis } => write!(f, "Expr({expr}, {axis:?})"),
            ScalarSource::Func(_) => f.write_str("Func(..)"),
            ScalarSource::Table(t) => write!(f, "Table({:?})", t.shape),
        }
    }
}

/// A real function of a point, optionally precomposed with an affine frame.
#[derive(Debug, Clone)]
pub struct ScalarField {
    source: ScalarSource,
    frame: Option<AffineMap>,
}

impl ScalarField {
    pub fn constant(v: f64) -> Self {
        ScalarField {
            source: ScalarSource::Const(v),
            frame: None,
        }
    }

    /// `axis` selects whether the point binds `x1..xn` or `y1..yn`.
    pub fn from_expr(expr: Expr, axis: Axis) -> Self {
        ScalarField {
            source: ScalarSource::Expr {
                expr: Arc::new(expr),
                axis,
            },
            frame: None,
        }
    }

    pub fn parse(src: &str, axis: Axis) -> Result<Self> {
        Ok(Self::from_expr(crate::expr::parse(src)?, axis))
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarField {
            source: ScalarSource::Func(Arc::new(f)),
            frame: None,
        }
    }

    pub fn from_table(t: SampleTable) -> Self {
        ScalarField {
            source: ScalarSource::Table(Arc::new(t)),
            frame: None,
        }
    }

    pub fn source(&self) -> &ScalarSource {
        &self.source
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.source {
            ScalarSource::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut buf = [0.0; MAX_DIM];
        let q: &[f64] = match &self.frame {
            Some(m) => {
                let n = m.dim();
                m.apply_into(x, &mut buf[..n]);
                &buf[..n]
            }
            None => x,
        };
        Ok(match &self.source {
            ScalarSource::Const(v) => *v,
            ScalarSource::Expr { expr, axis } => {
                let env = match axis {
                    Axis::X => Env::x(q),
                    Axis::Y => Env::y(q),
                };
                expr.eval(&env)?
            }
            ScalarSource::Func(f) => f(q),
            ScalarSource::Table(t) => t.eval(q),
        })
    }
}

/// Transformation of objects under a change of coordinates `z = F(x)`.
pub trait Pushforward {
    fn pushforward(&self, map: &AffineMap) -> Self;
}

fn precompose(frame: &Option<AffineMap>, map: &AffineMap) -> AffineMap {
    let back = map.inverse();
    match frame {
        Some(f) => f.compose(&back),
        None => back,
    }
}

impl Pushforward for ScalarField {
    /// `f ∘ F⁻¹`.
    fn pushforward(&self, map: &AffineMap) -> Self {
        match self.source {
            ScalarSource::Const(_) => self.clone(),
            _ => ScalarField {
                source: self.source.clone(),
                frame: Some(precompose(&self.frame, map)),
            },
        }
    }
}

/// Vector field with components `transform * comps(x)` in the coordinate basis.
#[derive(Debug, Clone)]
pub struct VectorField {
    comps: Vec<ScalarField>,
    transform: DMatrix<f64>,
}

impl VectorField {
    pub fn new(comps: Vec<ScalarField>) -> Self {
        let n = comps.len();
        VectorField {
            comps,
            transform: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.comps.iter().map(|c| c.eval(x)).collect::<Result<Vec<_>>>()?;
        let v = &self.transform * DVector::from_vec(raw);
        Ok(v.as_slice().to_vec())
    }
}

impl Pushforward for VectorField {
    /// `V ↦ J V ∘ F⁻¹`.
    fn pushforward(&self, map: &AffineMap) -> Self {
        VectorField {
            comps: self.comps.iter().map(|c| c.pushforward(map)).collect(),
            transform: map.matrix() * &self.transform,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricSample {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub det: f64,
    pub sqrt_det: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

/// Metric coefficients `g_ij(x)`.
///
/// With a frame `q = M x + s` the value at `x` is `Mᵀ g_e(q) M`, which is how
/// pushforwards are represented without touching the coefficient sources.
#[derive(Debug, Clone)]
pub struct MetricField {
    n: usize,
    entries: Vec<ScalarField>,
    frame: Option<AffineMap>,
}

impl MetricField {
    /// `rows[i][j]` is `g_ij`; the matrix must be symmetric at every sample.
    pub fn from_rows(rows: Vec<Vec<ScalarField>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || n > MAX_DIM {
            return Err(Error::Config(format!("metric dimension {n} not supported")));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Dimension {
                expected: n,
                got: r.len(),
            });
        }
        Ok(MetricField {
            n,
            entries: rows.into_iter().flatten().collect(),
            frame: None,
        })
    }

    pub fn constant(g: &DMatrix<f64>) -> Result<Self> {
        let rows = (0..g.nrows())
            .map(|i| (0..g.ncols()).map(|j| ScalarField::constant(g[(i, j)])).collect())
            .collect();
        Self::from_rows(rows)
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(&DMatrix::identity(n, n)).expect("identity metric")
    }

    pub fn diagonal(d: &[f64]) -> Result<Self> {
        Self::constant(&DMatrix::from_diagonal(&DVector::from_row_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// True when every coefficient is a literal constant.
    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(|e| e.as_constant().is_some())
    }

    /// Raw `g(x)` without the SPD check.
    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: x.len(),
            });
        }
        let n = self.n;
        let mut buf = [0.0; MAX_DIM];
        let q: &[f64] = match &self.frame {
            Some(m) => {
                m.apply_into(x, &mut buf[..n]);
                &buf[..n]
            }
            None => x,
        };
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] = self.entries[i * n + j].eval(q)?;
            }
        }
        if let Some(m) = &self.frame {
            let j = m.matrix();
            g = j.transpose() * g * j;
        }
        let scale = g.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for k in 0..i {
                if (g[(i, k)] - g[(k, i)]).abs() > 1e-14 * scale {
                    return Err(Error::Geometry {
                        point: x.to_vec(),
                        reason: "metric coefficients are not symmetric".into(),
                    });
                }
                let avg = 0.5 * (g[(i, k)] + g[(k, i)]);
                g[(i, k)] = avg;
                g[(k, i)] = avg;
            }
        }
        Ok(g)
    }

    pub fn metric_at(&self, x: &[f64]) -> Result<MetricSample> {
        let g = self.eval(x)?;
        sample_from_matrix(g).map_err(|reason| Error::Geometry {
            point: x.to_vec(),
            reason,
        })
    }
}

impl Pushforward for MetricField {
    /// `g̃(z) = J⁻ᵀ g(F⁻¹ z) J⁻¹`.
    fn pushforward(&self, map: &AffineMap) -> Self {
        MetricField {
            n: self.n,
            entries: self.entries.clone(),
            frame: Some(precompose(&self.frame, map)),
        }
    }
}

/// SPD check and derived quantities of a symmetric matrix.
pub fn sample_from_matrix(g: DMatrix<f64>) -> std::result::Result<MetricSample, String> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err("metric has non-finite coefficients".into());
    }
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let min_eig = eig.min();
    let max_eig = eig.max();
    if !(min_eig > SPD_EPS) {
        return Err(format!("metric not positive definite (min eigenvalue {min_eig:e})"));
    }
    let g_inv = g.clone().try_inverse().ok_or("metric not invertible")?;
    let g_inv = 0.5 * (&g_inv + g_inv.transpose());
    let det = g.determinant();
    Ok(MetricSample {
        g,
        g_inv,
        det,
        sqrt_det: det.sqrt(),
        min_eig,
        max_eig,
    })
}

pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = 0.5 * (m + m.transpose());
    let mut e: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.total_cmp(b));
    e
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub id: String,
    /// Chart-image box, per axis `[lo, hi]`.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    map: AffineMap,
}

impl Chart {
    pub fn new(id: impl Into<String>, lo: Vec<f64>, hi: Vec<f64>, offset: Vec<f64>, linear: DMatrix<f64>) -> Result<Self> {
        let id = id.into();
        let n = lo.len();
        if hi.len() != n || offset.len() != n || linear.nrows() != n {
            return Err(Error::Config(format!("chart `{id}` has inconsistent dimensions")));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::Config(format!("chart `{id}` has an empty box")));
        }
        let map = AffineMap::new(linear, DVector::from_vec(offset))
            .map_err(|e| Error::Config(format!("chart `{id}`: {e}")))?;
        Ok(Chart { id, lo, hi, map })
    }

    /// Identity-linear chart `x = p + offset`.
    pub fn translated(id: impl Into<String>, lo: Vec<f64>, hi: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let n = lo.len();
        Self::new(id, lo, hi, offset, DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Parameter -> chart coordinates.
    pub fn map(&self) -> &AffineMap {
        &self.map
    }

    pub fn offset(&self) -> &[f64] {
        self.map.shift().as_slice()
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        self.map.matrix()
    }

    pub fn to_chart(&self, p: &[f64]) -> Vec<f64> {
        self.map.apply(p)
    }

    pub fn to_param(&self, x: &[f64]) -> Vec<f64> {
        self.map.inverse().apply(x)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= a - 1e-12 * (1.0 + a.abs()) && *v <= b + 1e-12 * (1.0 + b.abs()))
    }

    pub fn contains_param(&self, p: &[f64]) -> bool {
        self.contains(&self.to_chart(p))
    }

    /// Bounding box of the chart domain in parameter coordinates.
    pub fn param_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let inv = self.map.inverse();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for corner in 0..(1usize << n) {
            let x: Vec<f64> = (0..n)
                .map(|k| if corner >> k & 1 == 1 { self.hi[k] } else { self.lo[k] })
                .collect();
            let p = inv.apply(&x);
            for k in 0..n {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }
}

/// Charts with a partition of unity and the reference cell `Y = Π [0, L_i)`.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub charts: Vec<Chart>,
    /// `π_α` as functions of the parameter coordinates; treated as zero
    /// outside chart `α`.
    pub partition: Vec<ScalarField>,
    pub cell_edge: Vec<f64>,
}

impl Atlas {
    /// Atlas with the built-in partition (constant 1 for one chart, a linear
    /// ramp across the overlap of two 1D charts).
    pub fn new(charts: Vec<Chart>, cell_edge: Vec<f64>) -> Result<Self> {
        let partition = default_partition(&charts)?;
        Self::with_partition(charts, partition, cell_edge)
    }

    pub fn single(chart: Chart) -> Result<Self> {
        let n = chart.dim();
        Self::new(vec![chart], vec![1.0; n])
    }

    pub fn with_partition(charts: Vec<Chart>, partition: Vec<ScalarField>, cell_edge: Vec<f64>) -> Result<Self> {
        if charts.is_empty() {
            return Err(Error::Config("atlas has no charts".into()));
        }
        let n = charts[0].dim();
        if charts.iter().any(|c| c.dim() != n) || cell_edge.len() != n {
            return Err(Error::Config("atlas charts and cell have mixed dimensions".into()));
        }
        if partition.len() != charts.len() {
            return Err(Error::Config(format!(
                "{} partition functions for {} charts",
                partition.len(),
                charts.len()
            )));
        }
        if cell_edge.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("cell edges must be positive".into()));
        }
        for (i, a) in charts.iter().enumerate() {
            if charts[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::Config(format!("duplicate chart id `{}`", a.id)));
            }
        }
        Ok(Atlas {
            charts,
            partition,
            cell_edge,
        })
    }

    pub fn dim(&self) -> usize {
        self.charts[0].dim()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_edge.iter().product()
    }

    pub fn chart(&self, id: &str) -> Option<&Chart> {
        self.charts.iter().find(|c| c.id == id)
    }

    /// `π_α(p)`, zero outside chart `α`.
    pub fn weight(&self, alpha: usize, p: &[f64]) -> Result<f64> {
        if self.charts[alpha].contains_param(p) {
            self.partition[alpha].eval(p)
        } else {
            Ok(0.0)
        }
    }

    /// Pairs of charts whose domains overlap with positive measure.
    pub fn overlapping_pairs(&self) -> Vec<(usize, usize)> {
        let bounds: Vec<_> = self.charts.iter().map(Chart::param_bounds).collect();
        let mut out = Vec::new();
        for a in 0..self.charts.len() {
            for b in a + 1..self.charts.len() {
                let (alo, ahi) = &bounds[a];
                let (blo, bhi) = &bounds[b];
                let overlap = (0..self.dim()).all(|k| alo[k].max(blo[k]) < ahi[k].min(bhi[k]));
                if overlap {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Check `Σ π_α = 1`, `π_α ≥ 0` on a parameter grid of spacing `h`
    /// covering all charts.
    pub fn validate_partition(&self, h: f64) -> Result<()> {
        let n = self.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for c in &self.charts {
            let (a, b) = c.param_bounds();
            for k in 0..n {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        let counts: Vec<usize> = (0..n).map(|k| ((hi[k] - lo[k]) / h).ceil() as usize + 1).collect();
        let total: usize = counts.iter().product();
        let mut p = vec![0.0; n];
        for flat in 0..total {
            let mut rem = flat;
            for k in (0..n).rev() {
                let i = rem % counts[k];
                rem /= counts[k];
                p[k] = (lo[k] + i as f64 * h).min(hi[k]);
            }
            let mut sum = 0.0;
            let mut covered = false;
            for a in 0..self.charts.len() {
                if self.charts[a].contains_param(&p) {
                    covered = true;
                    let w = self.partition[a].eval(&p)?;
                    if w < -1e-14 {
                        return Err(Error::Partition(format!(
                            "weight of chart `{}` is negative ({w}) at {p:?}",
                            self.charts[a].id
                        )));
                    }
                    sum += w;
                }
            }
            if covered && (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Partition(format!("weights sum to {sum} at {p:?}")));
            }
        }
        Ok(())
    }
}

fn default_partition(charts: &[Chart]) -> Result<Vec<ScalarField>> {
    match charts.len() {
        1 => Ok(vec![ScalarField::constant(1.0)]),
        2 if charts[0].dim() == 1 => {
            let (a_lo, a_hi) = charts[0].param_bounds();
            let (b_lo, b_hi) = charts[1].param_bounds();
            let (start, end) = (a_lo[0].max(b_lo[0]), a_hi[0].min(b_hi[0]));
            if !(start < end) {
                return Err(Error::Partition("two-chart default partition needs overlapping charts".into()));
            }
            // The chart reaching further left owns the left end of the overlap.
            let left_first = a_lo[0] <= b_lo[0];
            let ramp = move |p: &[f64]| ((end - p[0]) / (end - start)).clamp(0.0, 1.0);
            let (first, second): (ScalarField, ScalarField) = if left_first {
                (ScalarField::from_fn(ramp), ScalarField::from_fn(move |p| 1.0 - ramp(p)))
            } else {
                (ScalarField::from_fn(move |p| 1.0 - ramp(p)), ScalarField::from_fn(ramp))
            };
            Ok(vec![first, second])
        }
        _ => Err(Error::Partition(
            "no built-in partition of unity for this atlas; supply one explicitly".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapShift {
    pub first: String,
    pub second: String,
    /// `offset_second − offset_first = eps · L ∘ k`.
    pub k: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UcReport {
    pub eps: f64,
    pub shifts: Vec<OverlapShift>,
    pub violations: Vec<String>,
}

impl UcReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.ok() {
            Ok(self)
        } else {
            Err(Error::UcViolation {
                eps: self.eps,
                violations: self.violations,
            })
        }
    }
}

/// Check that chart transitions on overlaps are translations by integer
/// multiples of the eps-cell.
pub fn validate_uc(atlas: &Atlas, eps: f64) -> Result<UcReport> {
    if atlas.charts.is_empty() {
        return Err(Error::Config("atlas has no charts".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut violations = Vec::new();
    let base = atlas.charts[0].linear();
    for c in &atlas.charts[1..] {
        if (c.linear() - base).amax() > 1e-12 * base.amax() {
            violations.push(format!(
                "chart `{}` has a different linear part than `{}`",
                c.id, atlas.charts[0].id
            ));
        }
    }
    let mut shifts = Vec::new();
    for (a, b) in atlas.overlapping_pairs() {
        let (ca, cb) = (&atlas.charts[a], &atlas.charts[b]);
        let mut k = Vec::with_capacity(atlas.dim());
        let mut bad = false;
        for axis in 0..atlas.dim() {
            let step = eps * atlas.cell_edge[axis];
            let d = cb.offset()[axis] - ca.offset()[axis];
            let q = (d / step).round();
            if (d - q * step).abs() > 1e-9 * step {
                bad = true;
            }
            k.push(q as i64);
        }
        if bad {
            violations.push(format!(
                "offset difference between `{}` and `{}` is not a multiple of eps = {eps}",
                ca.id, cb.id
            ));
        } else {
            shifts.push(OverlapShift {
                first: ca.id.clone(),
                second: cb.id.clone(),
                k,
            });
        }
    }
    Ok(UcReport {
        eps,
        shifts,
        violations,
    })
}

/// The `(·)_Y` operator: same components, re-tagged onto `∂/∂y^i`.
pub fn transport_to_cell(v: &GridVectorField, n: usize) -> Result<GridVectorField> {
    retag(v, n, Basis::Manifold, Basis::Cell)
}

/// The `(·)_M` operator, inverse of [`transport_to_cell`].
pub fn transport_to_manifold(v: &GridVectorField, n: usize) -> Result<GridVectorField> {
    retag(v, n, Basis::Cell, Basis::Manifold)
}

fn retag(v: &GridVectorField, n: usize, from: Basis, to: Basis) -> Result<GridVectorField> {
    if v.components.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: v.components.len(),
        });
    }
    if v.basis != from {
        return Err(Error::Config(format!("vector field is in the {:?} basis, expected {from:?}", v.basis)));
    }
    Ok(GridVectorField {
        components: v.components.clone(),
        basis: to,
    })
}

/// `g(a, b) = aᵀ G b`.
pub fn inner(g: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += g[(i, j)] * a[i] * b[j];
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldgrid::{BoundaryKind, Grid, GridFunction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chart1(id: &str, lo: f64, hi: f64, off: f64) -> Chart {
        Chart::translated(id, vec![lo], vec![hi], vec![off]).unwrap()
    }

    #[test]
    fn uc_two_chart_examples() {
        // Parameter domains [0, 0.6] and [0.4, 1.0].
        let atlas = Atlas::new(vec![chart1("a", 0.0, 0.6, 0.0), chart1("b", 1.15, 1.75, 0.75)], vec![1.0]).unwrap();
        let ok = validate_uc(&atlas, 0.25).unwrap();
        assert!(ok.ok());
        assert_eq!(ok.shifts[0].k, vec![3]);

        let bad = validate_uc(&atlas, 0.4).unwrap();
        assert!(!bad.ok());
        assert_eq!(bad.violations.len(), 1);
        assert!(validate_uc(&atlas, 0.4).unwrap().into_result().is_err());
    }

    #[test]
    fn uc_single_chart_and_errors() {
        let atlas = Atlas::single(chart1("a", 0.0, 1.0, 0.0)).unwrap();
        let r = validate_uc(&atlas, 0.1).unwrap();
        assert!(r.ok() && r.shifts.is_empty());
        assert!(validate_uc(&atlas, 0.0).is_err());
        assert!(Atlas::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn uc_flags_unequal_linear_parts() {
        let a = Chart::new("a", vec![0.0], vec![1.0], vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let b = Chart::new("b", vec![0.0], vec![2.0], vec![0.0], DMatrix::from_element(1, 1, 2.0)).unwrap();
        let atlas = Atlas::with_partition(
            vec![a, b],
            vec![ScalarField::constant(0.5), ScalarField::constant(0.5)],
            vec![1.0],
        )
        .unwrap();
        let r = validate_uc(&atlas, 0.25).unwrap();
        assert!(r.violations.iter().any(|v| v.contains("linear part")));
    }

    #[test]
    fn default_partition_is_a_partition() {
        let atlas = Atlas::new(vec![chart1("a", 0.0, 0.6, 0.0), chart1("b", 1.15, 1.75, 0.75)], vec![1.0]).unwrap();
        atlas.validate_partition(1.0 / 64.0).unwrap();
        assert_eq!(atlas.weight(0, &[0.2]).unwrap(), 1.0);
        assert_eq!(atlas.weight(1, &[0.2]).unwrap(), 0.0);
        assert!((atlas.weight(0, &[0.5]).unwrap() - 0.5).abs() < 1e-12);

        let broken = Atlas::with_partition(
            atlas.charts.clone(),
            vec![ScalarField::constant(1.0), ScalarField::constant(1.0)],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(broken.validate_partition(1.0 / 64.0), Err(Error::Partition(_))));
    }

    #[test]
    fn metric_samples() {
        let id = MetricField::identity(2).metric_at(&[0.3, 0.1]).unwrap();
        assert_eq!(id.g, DMatrix::identity(2, 2));
        assert_eq!(id.g_inv, DMatrix::identity(2, 2));
        assert_eq!(id.sqrt_det, 1.0);

        let d = MetricField::diagonal(&[4.0, 1.0]).unwrap().metric_at(&[0.0, 0.0]).unwrap();
        assert_eq!(d.sqrt_det, 2.0);

        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = MetricField::constant(&g).unwrap().metric_at(&[0.0, 0.0]).unwrap();
        assert!((s.det - 3.0).abs() < 1e-14);
        assert!((s.sqrt_det - 3f64.sqrt()).abs() < 1e-14);
        assert!((&s.g * &s.g_inv - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn metric_rejects_non_spd_and_asymmetric() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = MetricField::constant(&g).unwrap().metric_at(&[0.5, 0.5]).unwrap_err();
        match err {
            Error::Geometry { point, .. } => assert_eq!(point, vec![0.5, 0.5]),
            e => panic!("{e}"),
        }
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(MetricField::constant(&g).unwrap().metric_at(&[0.0, 0.0]).is_err());
        let varying = MetricField::from_rows(vec![vec![ScalarField::parse("x1 - 1", Axis::X).unwrap()]]).unwrap();
        assert!(varying.metric_at(&[2.0]).is_ok());
        assert!(varying.metric_at(&[0.5]).is_err());
    }

    #[test]
    fn gg_inverse_consistent_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let g = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
            let s = sample_from_matrix(g).unwrap();
            assert!((&s.g * &s.g_inv - DMatrix::identity(2, 2)).amax() < 1e-12);
            assert!((s.sqrt_det * s.sqrt_det - s.det).abs() < 1e-12 * s.det);
        }
    }

    fn swap() -> AffineMap {
        AffineMap::linear(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap()
    }

    #[test]
    fn pushforward_swap_and_scaling() {
        let d = ScalarField::parse("2 + sin(2*pi*y1) + 0.5*y2", Axis::Y).unwrap();
        let sk = d.pushforward(&swap());
        for &(a, b) in &[(0.1, 0.7), (0.33, 0.02)] {
            assert_eq!(sk.eval(&[a, b]).unwrap(), d.eval(&[b, a]).unwrap());
        }
        let two = AffineMap::scaling(2, 2.0).unwrap();
        let scaled = d.pushforward(&two);
        for &(a, b) in &[(0.4, 1.8), (1.99, 0.0)] {
            assert_eq!(scaled.eval(&[a, b]).unwrap(), d.eval(&[a / 2.0, b / 2.0]).unwrap());
        }
        let same = d.pushforward(&AffineMap::identity(2));
        assert_eq!(same.eval(&[0.2, 0.3]).unwrap(), d.eval(&[0.2, 0.3]).unwrap());
    }

    #[test]
    fn metric_pushforward_rule() {
        let g = MetricField::from_rows(vec![
            vec![ScalarField::parse("1 + x1*x1", Axis::X).unwrap(), ScalarField::constant(0.3)],
            vec![ScalarField::constant(0.3), ScalarField::parse("2 + x2", Axis::X).unwrap()],
        ])
        .unwrap();
        let f = AffineMap::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 3.0, -2.0, 0.0]),
            DVector::from_vec(vec![0.5, 1.0]),
        )
        .unwrap();
        let pushed = g.pushforward(&f);
        let x = [0.3, 0.8];
        let z = f.apply(&x);
        let jinv = f.inverse_matrix();
        let expect = jinv.transpose() * g.eval(&x).unwrap() * jinv;
        assert!((pushed.eval(&z).unwrap() - expect).amax() < 1e-14);
    }

    #[test]
    fn pushforward_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = AffineMap::new(
            DMatrix::from_row_slice(2, 2, &[1.5, 0.4, -0.3, 0.8]),
            DVector::from_vec(vec![0.2, -1.0]),
        )
        .unwrap();
        let back = f.inverse();
        let s = ScalarField::parse("exp(x1) * cos(x2)", Axis::X).unwrap();
        let v = VectorField::new(vec![
            ScalarField::parse("x1*x2", Axis::X).unwrap(),
            ScalarField::parse("sin(x1)", Axis::X).unwrap(),
        ]);
        let g = MetricField::from_rows(vec![
            vec![ScalarField::parse("2 + x1*x1", Axis::X).unwrap(), ScalarField::parse("0.1*x2", Axis::X).unwrap()],
            vec![ScalarField::parse("0.1*x2", Axis::X).unwrap(), ScalarField::constant(3.0)],
        ])
        .unwrap();
        let (s2, v2, g2) = (
            s.pushforward(&f).pushforward(&back),
            v.pushforward(&f).pushforward(&back),
            g.pushforward(&f).pushforward(&back),
        );
        for _ in 0..50 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            assert!((s2.eval(&x).unwrap() - s.eval(&x).unwrap()).abs() < 1e-12);
            let (a, b) = (v2.eval(&x).unwrap(), v.eval(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
            assert!((g2.eval(&x).unwrap() - g.eval(&x).unwrap()).amax() < 1e-12);
        }
        // vector components transform with the Jacobian
        let sk = v.pushforward(&swap());
        let x = [0.2, 0.9];
        let a = sk.eval(&[x[1], x[0]]).unwrap();
        let b = v.eval(&x).unwrap();
        assert_eq!(a, vec![b[1], b[0]]);
    }

    #[test]
    fn affine_map_errors_and_algebra() {
        assert!(AffineMap::linear(DMatrix::zeros(2, 2)).is_err());
        let f = AffineMap::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]), DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let id = f.compose(&f.inverse());
        let x = [0.3, -0.7];
        let y = id.apply(&x);
        assert!((y[0] - x[0]).abs() < 1e-15 && (y[1] - x[1]).abs() < 1e-15);
    }

    #[test]
    fn sample_table_interpolation() {
        let t = SampleTable::new(vec![0.0], vec![0.25], vec![4], vec![1.0, 2.0, 3.0, 2.0], true).unwrap();
        assert_eq!(t.eval(&[0.25]), 2.0);
        assert_eq!(t.eval(&[0.125]), 1.5);
        assert_eq!(t.eval(&[0.875]), 1.5);
        assert_eq!(t.eval(&[1.25]), 2.0);
        let csv = "y1,y2,value\n0,0,1\n0,1,2\n1,0,3\n1,1,4\n";
        let t = SampleTable::from_csv(csv.as_bytes(), 2, false).unwrap();
        assert_eq!(t.eval(&[0.5, 0.5]), 2.5);
        assert!(SampleTable::from_csv("a,b\n0,1\n0.3,2\n1,3\n".as_bytes(), 1, false).is_err());
    }

    #[test]
    fn transport_round_trip_and_metric_exchange() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = Grid::for_box(&[0.0, 0.0], &[1.0, 1.0], &[0.125, 0.125]).unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            let comps = (0..2)
                .map(|_| {
                    let vals: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    GridFunction::from_values("c", grid.clone(), BoundaryKind::Free, vals).unwrap()
                })
                .collect();
            GridVectorField {
                components: comps,
                basis: Basis::Manifold,
            }
        };
        let v1 = mk(&mut rng);
        let v2 = mk(&mut rng);
        let cell = transport_to_cell(&v1, 2).unwrap();
        assert_eq!(cell.basis, Basis::Cell);
        let back = transport_to_manifold(&cell, 2).unwrap();
        for (a, b) in back.components.iter().zip(&v1.components) {
            assert!(a.values.iter().zip(&b.values).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert!(transport_to_cell(&cell, 2).is_err());
        assert!(transport_to_cell(&v1, 3).is_err());

        let c2 = transport_to_cell(&v2, 2).unwrap();
        for _ in 0..20 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let g = &a * a.transpose() + DMatrix::identity(2, 2) * 0.2;
            for idx in 0..grid.len() {
                let m = [v1.components[0].values[idx], v1.components[1].values[idx]];
                let n = [v2.components[0].values[idx], v2.components[1].values[idx]];
                let y1 = [cell.components[0].values[idx], cell.components[1].values[idx]];
                let y2 = [c2.components[0].values[idx], c2.components[1].values[idx]];
                assert!((inner(&g, &m, &n) - inner(&g, &y1, &y2)).abs() <= 1e-13);
            }
        }
        // V = ∂/∂x¹ becomes ∂/∂y¹
        let e1 = GridVectorField {
            components: vec![GridFunction::constant("c", grid.clone(), 1.0), GridFunction::constant("c", grid.clone(), 0.0)],
            basis: Basis::Manifold,
        };
        let t = transport_to_cell(&e1, 2).unwrap();
        assert!(t.components[0].values.iter().all(|&v| v == 1.0));
        assert!(t.components[1].values.iter().all(|&v| v == 0.0));
    }
}
