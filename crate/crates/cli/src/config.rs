//! JSON run configuration.
//!
//! Scalar fields accept a number, an expression string, or a sample table
//! `{"table": "file.csv", "periodic": true}` (paths relative to the config).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;
use unfold_homog::cell::CoefficientField;
use unfold_homog::equivalence::AtlasTransform;
use unfold_homog::expr::{self, Axis};
use unfold_homog::geometry::{Atlas, Chart, MetricField, SampleTable, ScalarField};
use unfold_homog::solve::ProblemSpec;
use unfold_homog::Error;

pub const MAX_N_Y: usize = 1024;
pub const MAX_GRID_POINTS: usize = 4097;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Expr(String),
    Table {
        table: String,
        #[serde(default)]
        periodic: bool,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartConfig {
    pub id: String,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
    /// Linear part of the chart map, row-major; identity when omitted.
    #[serde(default)]
    pub linear: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    pub d: Scalar,
    pub d0: f64,
    pub d1: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    #[serde(default)]
    pub perm: Option<Vec<usize>>,
    #[serde(default)]
    pub scale: Option<Vec<f64>>,
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Constant `g_Z` for the cell-transform check; `F_* g_Y` when omitted.
    #[serde(default)]
    pub target_metric: Option<Vec<Vec<f64>>>,
}

fn default_cells_per_eps() -> usize {
    16
}
fn default_n_y() -> usize {
    64
}
fn default_samples() -> usize {
    3
}
fn default_points() -> usize {
    65
}
fn default_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: usize,
    /// Edge lengths of the reference cell; unit cell when omitted.
    #[serde(default)]
    pub cell: Option<Vec<f64>>,
    pub charts: Vec<ChartConfig>,
    #[serde(default)]
    pub partition: Option<Vec<Scalar>>,
    /// `g_ij` rows in parameter coordinates; identity when omitted.
    #[serde(default)]
    pub metric: Option<Vec<Vec<Scalar>>>,
    pub coefficient: CoefficientConfig,
    #[serde(default)]
    pub reaction: f64,
    pub source: Scalar,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default = "default_cells_per_eps")]
    pub cells_per_eps: usize,
    #[serde(default = "default_n_y")]
    pub n_y: usize,
    #[serde(default = "default_samples")]
    pub macro_samples: usize,
    #[serde(default = "default_points")]
    pub grid_points: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub transform: Option<TransformConfig>,
    #[serde(default)]
    pub seed: u64,
}

/// A parsed config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
    /// Raw config bytes followed by every referenced table, for hashing.
    pub inputs: Vec<u8>,
}

pub fn load(path: &Path) -> Result<LoadedConfig, Vec<String>> {
    let bytes = fs::read(path).map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    let config: RunConfig = serde_json::from_slice(&bytes).map_err(|e| vec![format!("invalid config: {e}")])?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut inputs = bytes;
    for t in config.tables() {
        if let Ok(b) = fs::read(base.join(&t)) {
            inputs.extend(b);
        }
    }
    Ok(LoadedConfig { config, base, inputs })
}

impl Scalar {
    fn table_path(&self) -> Option<&str> {
        match self {
            Scalar::Table { table, .. } => Some(table),
            _ => None,
        }
    }

    fn check(&self, what: &str, axis: Axis, n: usize, base: &Path, issues: &mut Vec<String>) {
        match self {
            Scalar::Number(v) if !v.is_finite() => issues.push(format!("{what}: value must be finite")),
            Scalar::Number(_) => {}
            Scalar::Expr(src) => {
                if src.len() > 64 * 1024 {
                    issues.push(format!("{what}: expression longer than 64 KiB"));
                    return;
                }
                match expr::parse(src) {
                    Ok(e) => {
                        if let Err(err) = e.check_vars(axis, n) {
                            issues.push(format!("{what}: {err}"));
                        }
                    }
                    Err(err) => issues.push(format!("{what}: {err}")),
                }
            }
            Scalar::Table { table, periodic } => {
                let p = base.join(table);
                match fs::File::open(&p) {
                    Ok(f) => {
                        if let Err(err) = SampleTable::from_csv(f, n, *periodic) {
                            issues.push(format!("{what}: table {}: {err}", p.display()));
                        }
                    }
                    Err(err) => issues.push(format!("{what}: cannot open table {}: {err}", p.display())),
                }
            }
        }
    }

    pub fn build(&self, axis: Axis, n: usize, base: &Path) -> Result<ScalarField, Error> {
        match self {
            Scalar::Number(v) => Ok(ScalarField::constant(*v)),
            Scalar::Expr(src) => {
                let e = expr::parse(src)?;
                e.check_vars(axis, n)?;
                Ok(ScalarField::from_expr(e, axis))
            }
            Scalar::Table { table, periodic } => {
                let f = fs::File::open(base.join(table))?;
                Ok(ScalarField::from_table(SampleTable::from_csv(f, n, *periodic)?))
            }
        }
    }
}

fn matrix(rows: &[Vec<f64>], n: usize) -> Option<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return None;
    }
    Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl RunConfig {
    fn tables(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |s: &Scalar| {
            if let Some(p) = s.table_path() {
                out.push(p.to_string());
            }
        };
        push(&self.coefficient.d);
        push(&self.source);
        self.metric.iter().flatten().flatten().for_each(&mut push);
        self.partition.iter().flatten().for_each(&mut push);
        out
    }

    pub fn cell_edge(&self) -> Vec<f64> {
        self.cell.clone().unwrap_or_else(|| vec![1.0; self.dimension])
    }

    /// Every schema violation, not just the first.
    pub fn validate(&self, base: &Path) -> Vec<String> {
        let mut issues = Vec::new();
        let n = self.dimension;
        if !(1..=2).contains(&n) {
            issues.push(format!("dimension must be 1 or 2, got {n}"));
            return issues;
        }
        if let Some(c) = &self.cell {
            if c.len() != n || c.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                issues.push(format!("cell must list {n} positive edge lengths"));
            }
        }
        if self.charts.is_empty() {
            issues.push("at least one chart is required".into());
        }
        for (i, c) in self.charts.iter().enumerate() {
            let at = format!("charts[{i}] (`{}`)", c.id);
            if c.id.is_empty() {
                issues.push(format!("{at}: id must be nonempty"));
            }
            if self.charts[..i].iter().any(|d| d.id == c.id) {
                issues.push(format!("{at}: duplicate id"));
            }
            if c.lo.len() != n || c.hi.len() != n {
                issues.push(format!("{at}: lo and hi need {n} entries"));
            } else if c.lo.iter().zip(&c.hi).any(|(a, b)| !(a < b)) {
                issues.push(format!("{at}: empty box (lo must be below hi)"));
            }
            if c.offset.as_ref().is_some_and(|o| o.len() != n) {
                issues.push(format!("{at}: offset needs {n} entries"));
            }
            if let Some(l) = &c.linear {
                match matrix(l, n) {
                    Some(m) if m.determinant().abs() > 1e-12 => {}
                    Some(_) => issues.push(format!("{at}: linear part is singular")),
                    None => issues.push(format!("{at}: linear part must be {n}x{n}")),
                }
            }
        }
        if let Some(p) = &self.partition {
            if p.len() != self.charts.len() {
                issues.push(format!("partition has {} entries for {} charts", p.len(), self.charts.len()));
            }
            for (i, s) in p.iter().enumerate() {
                s.check(&format!("partition[{i}]"), Axis::X, n, base, &mut issues);
            }
        }
        if let Some(m) = &self.metric {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                issues.push(format!("metric must be {n}x{n}"));
            } else {
                for (i, r) in m.iter().enumerate() {
                    for (j, s) in r.iter().enumerate() {
                        s.check(&format!("metric[{i}][{j}]"), Axis::X, n, base, &mut issues);
                    }
                }
            }
        }
        let c = &self.coefficient;
        c.d.check("coefficient.d", Axis::Y, n, base, &mut issues);
        if !(c.d0 > 0.0 && c.d1 >= c.d0 && c.d1.is_finite()) {
            issues.push(format!("coefficient bounds need 0 < d0 <= d1, got d0 = {}, d1 = {}", c.d0, c.d1));
        }
        if !(self.reaction >= 0.0 && self.reaction.is_finite()) {
            issues.push(format!("reaction must be >= 0, got {}", self.reaction));
        }
        self.source.check("source", Axis::X, n, base, &mut issues);
        if self.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            issues.push("eps values must be positive".into());
        }
        if self.eps.windows(2).any(|w| !(w[1] < w[0])) {
            issues.push("eps values must be strictly decreasing".into());
        }
        if self.cells_per_eps < 8 {
            issues.push(format!("cells_per_eps must be at least 8, got {}", self.cells_per_eps));
        }
        if !(4..=MAX_N_Y).contains(&self.n_y) {
            issues.push(format!("n_y must lie in 4..={MAX_N_Y}, got {}", self.n_y));
        }
        if !(2..=64).contains(&self.macro_samples) {
            issues.push(format!("macro_samples must lie in 2..=64, got {}", self.macro_samples));
        }
        if !(3..=MAX_GRID_POINTS).contains(&self.grid_points) {
            issues.push(format!("grid_points must lie in 3..={MAX_GRID_POINTS}, got {}", self.grid_points));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-4) {
            issues.push(format!("tol must lie in (0, 1e-4], got {}", self.tol));
        }
        if let Some(t) = &self.transform {
            if let Err(e) = self.build_transform(t) {
                issues.push(format!("transform: {e}"));
            }
            if let Some(g) = &t.target_metric {
                if matrix(g, n).is_none() {
                    issues.push(format!("transform.target_metric must be {n}x{n}"));
                }
            }
        }
        issues
    }

    pub fn build_transform(&self, t: &TransformConfig) -> Result<AtlasTransform, Error> {
        let n = self.dimension;
        match (&t.matrix, &t.perm, &t.scale) {
            (Some(m), None, None) => {
                let m = matrix(m, n).ok_or_else(|| Error::Transform(format!("matrix must be {n}x{n}")))?;
                AtlasTransform::from_matrix(&m)
            }
            (None, perm, scale) => {
                let perm = perm.clone().unwrap_or_else(|| (0..n).collect());
                let scale = scale.clone().unwrap_or_else(|| vec![1.0; n]);
                if perm.len() != n {
                    return Err(Error::Transform(format!("perm needs {n} entries")));
                }
                AtlasTransform::new(perm, scale)
            }
            _ => Err(Error::Transform("give either `matrix` or `perm`/`scale`, not both".into())),
        }
    }

    pub fn target_metric(&self) -> Option<DMatrix<f64>> {
        let t = self.transform.as_ref()?;
        matrix(t.target_metric.as_ref()?, self.dimension)
    }

    pub fn build_problem(&self, base: &Path) -> Result<ProblemSpec, Error> {
        let n = self.dimension;
        let cell = self.cell_edge();
        let charts = self
            .charts
            .iter()
            .map(|c| {
                let offset = c.offset.clone().unwrap_or_else(|| vec![0.0; n]);
                let linear = match &c.linear {
                    Some(l) => matrix(l, n).ok_or_else(|| Error::Config(format!("chart `{}`: bad linear part", c.id)))?,
                    None => DMatrix::identity(n, n),
                };
                Chart::new(c.id.clone(), c.lo.clone(), c.hi.clone(), offset, linear)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let atlas = match &self.partition {
            Some(p) => {
                let parts = p.iter().map(|s| s.build(Axis::X, n, base)).collect::<Result<Vec<_>, _>>()?;
                Atlas::with_partition(charts, parts, cell.clone())?
            }
            None => Atlas::new(charts, cell.clone())?,
        };
        let metric = match &self.metric {
            Some(rows) => MetricField::from_rows(
                rows.iter()
                    .map(|r| r.iter().map(|s| s.build(Axis::X, n, base)).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?,
            )?,
            None => MetricField::identity(n),
        };
        let d = self.coefficient.d.build(Axis::Y, n, base)?;
        let coef = CoefficientField::new(d, cell, self.coefficient.d0, self.coefficient.d1)?;
        let source = self.source.build(Axis::X, n, base)?;
        ProblemSpec::new(atlas, metric, coef, self.reaction, source)
    }
}
