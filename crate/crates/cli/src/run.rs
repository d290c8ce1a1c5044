//! Subcommand orchestration: load and validate the config, run the
//! computation inside a sized thread pool, write artifacts and the manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use unfold_homog::cell::{effective_field, CoefficientField};
use unfold_homog::equivalence::{check_cell_transform, check_invariance, InvarianceOptions};
use unfold_homog::fieldgrid::{grad_m, norms, BoundaryKind, Grid, GridFunction, MetricSamples};
use unfold_homog::geometry::{validate_uc, Pushforward, ScalarField, VectorField};
use unfold_homog::solve::{
    convergence_study, effective_coefficients, fine_grid, solve_fine, solve_homogenized, EffectiveCoefficients,
    ProblemSpec, SolverOptions, StudyOptions,
};
use unfold_homog::unfolding::{
    chart_grid, check_divergence_exchange, check_gradient_exchange, check_metric_exchange, norm_ratio, ucm_residual_atlas,
    unfold_global, unfold_local, NormP, UnfoldConfig,
};
use unfold_homog::Error;

use crate::config::{self, RunConfig};
use crate::report::{convergence_csv, loglog_svg, matrix_json, num, sha256_hex, write_json};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

pub const THREADS_ENV: &str = "UNFOLD_HOMOG_THREADS";

/// Identities checked by `unfold-check`, relative to the compared magnitude.
pub const OVERLAP_TOL: f64 = 1e-13;
pub const EXCHANGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Cell,
    Fine,
    Homogenize,
    Converge,
    UnfoldCheck,
    Equivalence,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Validate,
        Command::Cell,
        Command::Fine,
        Command::Homogenize,
        Command::Converge,
        Command::UnfoldCheck,
        Command::Equivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Cell => "cell",
            Command::Fine => "fine",
            Command::Homogenize => "homogenize",
            Command::Converge => "converge",
            Command::UnfoldCheck => "unfold-check",
            Command::Equivalence => "equivalence",
        }
    }

    pub fn parse(s: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub code: i32,
    pub reason: Option<String>,
    pub messages: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub artifacts: Vec<String>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    reason: String,
    messages: Vec<String>,
}

impl Failure {
    fn validation(reason: &str, messages: Vec<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            reason: reason.into(),
            messages,
        }
    }

    fn numeric(reason: &str, messages: Vec<String>) -> Self {
        Failure {
            code: EXIT_NUMERIC,
            reason: reason.into(),
            messages,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { EXIT_NUMERIC } else { EXIT_VALIDATION },
            reason: e.reason_code().into(),
            messages: vec![e.to_string()],
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::validation("io", vec![e.to_string()])
    }
}

/// Mutable state shared by a subcommand run.
struct Ctx<'a> {
    cfg: &'a RunConfig,
    base: &'a Path,
    out: &'a Path,
    artifacts: Vec<String>,
    timings: Map<String, Value>,
    warnings: Vec<String>,
}

impl Ctx<'_> {
    fn file(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.into());
        self.out.join(name)
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<(), Failure> {
        let p = self.file(name);
        write_json(&p, v)?;
        Ok(())
    }

    fn text(&mut self, name: &str, s: &str) -> Result<(), Failure> {
        let p = self.file(name);
        fs::write(p, s)?;
        Ok(())
    }

    fn problem(&self) -> Result<ProblemSpec, Failure> {
        Ok(self.cfg.build_problem(self.base)?)
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions { tol: self.cfg.tol }
    }

    fn first_eps(&self) -> Result<f64, Failure> {
        self.cfg
            .eps
            .first()
            .copied()
            .ok_or_else(|| Failure::validation("config", vec!["this subcommand needs a nonempty eps list".into()]))
    }
}

fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|t| *t > 0)
}

/// Run one subcommand end to end. Never panics on bad input; every failure
/// maps to an exit code and a reason.
pub fn run(cmd: Command, opts: &RunOptions) -> Outcome {
    let started = Instant::now();
    let loaded = match config::load(&opts.config) {
        Ok(l) => l,
        Err(messages) => {
            return Outcome {
                code: EXIT_VALIDATION,
                reason: Some("schema".into()),
                messages,
                out_dir: None,
                artifacts: vec![],
            }
        }
    };
    let mut cfg = loaded.config;
    if let Some(t) = opts.tol {
        cfg.tol = t;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let out = match (&opts.out, &cfg.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => loaded.base.join(o),
        (None, None) => PathBuf::from("out"),
    };
    if let Err(e) = fs::create_dir_all(&out) {
        return Outcome {
            code: EXIT_VALIDATION,
            reason: Some("output_dir".into()),
            messages: vec![format!("cannot create output directory {}: {e}", out.display())],
            out_dir: None,
            artifacts: vec![],
        };
    }
    let threads = opts.threads.or_else(threads_from_env).unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            return Outcome {
                code: EXIT_VALIDATION,
                reason: Some("threads".into()),
                messages: vec![e.to_string()],
                out_dir: Some(out),
                artifacts: vec![],
            }
        }
    };

    let mut ctx = Ctx {
        cfg: &cfg,
        base: &loaded.base,
        out: &out,
        artifacts: Vec::new(),
        timings: Map::new(),
        warnings: Vec::new(),
    };
    let issues = cfg.validate(&loaded.base);
    let result = if issues.is_empty() {
        pool.install(|| dispatch(cmd, &mut ctx))
    } else {
        Err(Failure::validation("schema", issues))
    };
    let (code, reason, mut messages) = match result {
        Ok(()) => (EXIT_OK, None, vec![]),
        Err(f) => (f.code, Some(f.reason), f.messages),
    };
    messages.extend(ctx.warnings.iter().map(|w| format!("warning: {w}")));
    ctx.timings.insert("total_seconds".into(), json!(started.elapsed().as_secs_f64()));

    let manifest = json!({
        "tool": "unfold-homog",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": unfold_homog::VERSION,
        "subcommand": cmd.name(),
        "config": opts.config.display().to_string(),
        "inputs_sha256": sha256_hex(&loaded.inputs),
        "seed": cfg.seed,
        "tol": cfg.tol,
        "threads": pool.current_num_threads(),
        "started_unix": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "timings": Value::Object(ctx.timings.clone()),
        "artifacts": ctx.artifacts,
        "status": if code == EXIT_OK { "ok" } else { "failed" },
        "exit_code": code,
        "reason": reason,
        "messages": messages,
    });
    let mut artifacts = ctx.artifacts.clone();
    if write_json(&out.join("manifest.json"), &manifest).is_ok() {
        artifacts.push("manifest.json".into());
    }
    Outcome {
        code,
        reason,
        messages,
        out_dir: Some(out),
        artifacts,
    }
}

fn dispatch(cmd: Command, ctx: &mut Ctx) -> Result<(), Failure> {
    match cmd {
        Command::Validate => validate(ctx),
        Command::Cell => cell(ctx),
        Command::Fine => fine(ctx),
        Command::Homogenize => homogenize(ctx),
        Command::Converge => converge(ctx),
        Command::UnfoldCheck => unfold_check(ctx),
        Command::Equivalence => equivalence(ctx),
    }
}

fn validate(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = ctx.problem()?;
    let cfg = ctx.cfg;
    let mut violations = Vec::new();
    let mut uc = Vec::new();
    let mut any_uc = false;
    for &eps in &cfg.eps {
        let r = validate_uc(&p.atlas, eps)?;
        any_uc |= !r.ok();
        violations.extend(r.violations.iter().map(|v| format!("eps = {eps}: {v}")));
        if r.ok() {
            if let Err(e) = fine_grid(&p, eps, cfg.cells_per_eps) {
                violations.push(format!("eps = {eps}: {e}"));
            }
        }
        uc.push(json!({
            "eps": eps,
            "ok": r.ok(),
            "shifts": r.shifts.iter().map(|s| json!({"first": s.first, "second": s.second, "k": s.k})).collect::<Vec<_>>(),
            "violations": r.violations,
        }));
    }
    let h = cfg
        .eps
        .iter()
        .map(|e| e * p.cell_edge().iter().cloned().fold(f64::INFINITY, f64::min) / cfg.cells_per_eps as f64)
        .fold(1.0 / 64.0, f64::min);
    if let Err(e) = p.atlas.validate_partition(h) {
        violations.push(e.to_string());
    }
    if let Err(e) = p.coefficient.sample(cfg.n_y) {
        violations.push(e.to_string());
    }
    let c = p.chart();
    let grid = Grid::with_points(&c.lo, &c.hi, &vec![cfg.grid_points.min(65); p.dim()])?;
    if let Err(e) = MetricSamples::new(&p.chart_metric(), &grid) {
        violations.push(e.to_string());
    }
    match GridFunction::from_field(&c.id, grid, BoundaryKind::Free, &p.chart_source()) {
        Ok(f) if f.values.iter().any(|v| !v.is_finite()) => violations.push("source is not finite on the grid".into()),
        Ok(_) => {}
        Err(e) => violations.push(e.to_string()),
    }
    ctx.json(
        "validation.json",
        &json!({"ok": violations.is_empty(), "violations": violations, "uc": uc}),
    )?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::validation(if any_uc { "uc_violation" } else { "validation" }, violations))
    }
}

fn effective(ctx: &mut Ctx, p: &ProblemSpec) -> Result<EffectiveCoefficients, Failure> {
    let t = Instant::now();
    let coeffs = effective_coefficients(p, ctx.cfg.macro_samples, ctx.cfg.n_y, ctx.cfg.tol)?;
    ctx.timings.insert("cell_seconds".into(), json!(t.elapsed().as_secs_f64()));
    for pt in coeffs.points() {
        if !pt.spd.floor_ok {
            ctx.warnings.push(format!(
                "min eigenvalue {} at x = {:?} is below the plausibility floor {}",
                pt.spd.min_eig, pt.x, pt.spd.floor
            ));
        }
    }
    Ok(coeffs)
}

fn cell(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = ctx.problem()?;
    let coeffs = effective(ctx, &p)?;
    let n = p.dim();
    let mut samples = Vec::new();
    let mut csv = String::new();
    let mut header: Vec<String> = (1..=n).map(|k| format!("x{k}")).collect();
    for k in 1..=n {
        for i in 1..=n {
            header.push(format!("B_{k}{i}"));
        }
    }
    for k in 1..=n {
        for i in 1..=n {
            header.push(format!("Bt_{k}{i}"));
        }
    }
    header.extend((1..=n).map(|k| format!("eig{k}")));
    header.push("residual".into());
    csv.push_str(&header.join(","));
    csv.push_str("\r\n");
    for pt in coeffs.points() {
        let t = &pt.tensor;
        samples.push(json!({
            "x": pt.x,
            "B": matrix_json(&t.b),
            "B_tilde": matrix_json(&t.b_tilde),
            "B_tilde_quadratic": matrix_json(&pt.b_quadratic),
            "quadratic_gap": (&t.b_tilde - &pt.b_quadratic).amax(),
            "eigenvalues": t.eigenvalues,
            "asymmetry": pt.spd.asymmetry,
            "min_eig": pt.spd.min_eig,
            "reuss_floor": pt.spd.floor,
            "floor_ok": pt.spd.floor_ok,
            "residual": pt.residual(),
            "iterations": pt.solution.iterations(),
        }));
        let mut row: Vec<String> = pt.x.iter().map(|v| unfold_homog::fieldgrid::fmt17(*v)).collect();
        row.extend(t.b.transpose().iter().map(|v| unfold_homog::fieldgrid::fmt17(*v)));
        row.extend(t.b_tilde.transpose().iter().map(|v| unfold_homog::fieldgrid::fmt17(*v)));
        row.extend(t.eigenvalues.iter().map(|v| unfold_homog::fieldgrid::fmt17(*v)));
        row.push(unfold_homog::fieldgrid::fmt17(pt.residual()));
        csv.push_str(&row.join(","));
        csv.push_str("\r\n");
    }
    ctx.json(
        "tensors.json",
        &json!({"n_y": ctx.cfg.n_y, "cell": p.cell_edge(), "samples": samples}),
    )?;
    ctx.text("tensors.csv", &csv)
}

fn solution_summary(u: &GridFunction, p: &ProblemSpec) -> Result<Value, Failure> {
    let nm = norms(u, &p.chart_metric())?;
    Ok(json!({
        "l2": nm.l2,
        "h1_semi": nm.h1_semi,
        "max_abs": u.max_abs(),
        "min": u.values.iter().cloned().fold(f64::INFINITY, f64::min),
    }))
}

fn write_grid_function(ctx: &mut Ctx, name: &str, u: &GridFunction) -> Result<(), Failure> {
    let p = ctx.file(name);
    let f = fs::File::create(p)?;
    u.write_csv(std::io::BufWriter::new(f))?;
    Ok(())
}

fn fine(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = ctx.problem()?;
    let eps = ctx.first_eps()?;
    let t = Instant::now();
    let r = solve_fine(&p, eps, ctx.cfg.cells_per_eps, ctx.solver())?;
    ctx.timings.insert("solve_seconds".into(), json!(t.elapsed().as_secs_f64()));
    let u = &r.result.u;
    write_grid_function(ctx, "fine.csv", u)?;
    let summary = json!({
        "eps": eps,
        "h": u.grid.h,
        "points": u.grid.shape,
        "residual": r.result.residual,
        "iterations": r.result.iterations,
        "energy": r.result.energy,
        "load": r.result.load,
        "solution": solution_summary(u, &p)?,
    });
    ctx.json("fine.json", &summary)
}

fn homogenize(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = ctx.problem()?;
    let coeffs = effective(ctx, &p)?;
    let c = p.chart();
    let grid = Grid::with_points(&c.lo, &c.hi, &vec![ctx.cfg.grid_points; p.dim()])?;
    let t = Instant::now();
    let r = solve_homogenized(&p, &coeffs, &grid, ctx.solver())?;
    ctx.timings.insert("solve_seconds".into(), json!(t.elapsed().as_secs_f64()));
    write_grid_function(ctx, "homogenized.csv", &r.u)?;
    let summary = json!({
        "points": r.u.grid.shape,
        "residual": r.residual,
        "iterations": r.iterations,
        "energy": r.energy,
        "load": r.load,
        "b_tilde_at_origin": matrix_json(&coeffs.b_tilde_at(&c.lo)),
        "solution": solution_summary(&r.u, &p)?,
    });
    ctx.json("homogenized.json", &summary)
}

fn converge(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = ctx.problem()?;
    ctx.first_eps()?;
    let cfg = ctx.cfg;
    let t = Instant::now();
    let table = convergence_study(
        &p,
        &cfg.eps,
        StudyOptions {
            cells_per_eps: cfg.cells_per_eps,
            n_y: cfg.n_y,
            macro_samples: cfg.macro_samples,
            tol: cfg.tol,
        },
    )?;
    ctx.timings.insert("study_seconds".into(), json!(t.elapsed().as_secs_f64()));
    let per_eps: Map<String, Value> = table.rows.iter().map(|r| (format!("eps={}", r.eps), json!(r.seconds))).collect();
    ctx.timings.insert("per_eps_seconds".into(), Value::Object(per_eps));

    ctx.text("convergence.csv", &convergence_csv(&table.rows))?;
    let eps: Vec<f64> = table.rows.iter().map(|r| r.eps).collect();
    let svg = loglog_svg(
        "errors against eps",
        &eps,
        &[
            ("L2 error", table.rows.iter().map(|r| r.l2_err).collect()),
            ("unfolded L2 error", table.rows.iter().map(|r| r.unfolded_l2_err).collect()),
            ("corrector H1 error", table.rows.iter().map(|r| r.corrector_h1_err).collect()),
            ("UCM residual", table.rows.iter().map(|r| r.ucm_residual).collect()),
        ],
    );
    ctx.text("convergence.svg", &svg)?;
    let bound_holds = table.rows.iter().all(|r| r.u_l2 + r.grad_l2 <= table.apriori_bound);
    let first = table.rows.first().map_or(0.0, |r| r.l2_err);
    let last = table.rows.last().map_or(0.0, |r| r.l2_err);
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|r| {
            json!({
                "eps": r.eps,
                "l2_err": num(r.l2_err),
                "unfolded_l2_err": num(r.unfolded_l2_err),
                "corrector_h1_err": num(r.corrector_h1_err),
                "ucm_residual": num(r.ucm_residual),
                "iterations": r.iterations,
                "u_l2": num(r.u_l2),
                "grad_l2": num(r.grad_l2),
            })
        })
        .collect();
    let doc = json!({
        "rows": rows,
        "flags": {
            "l2_decreasing": table.flags.l2_decreasing,
            "unfolded_decreasing": table.flags.unfolded_decreasing,
            "corrector_decreasing": table.flags.corrector_decreasing,
            "ucm_decreasing": table.flags.ucm_decreasing,
        },
        "final_over_first_l2": if first > 0.0 { num(last / first) } else { Value::Null },
        "apriori_bound": table.apriori_bound,
        "apriori_bound_holds": bound_holds,
        "b_tilde": matrix_json(&table.b_tilde),
    });
    ctx.json("convergence.json", &doc)
}

/// `Σ a_j sin(b_j · p + c_j) + a_0`, a smooth test function drawn from `rng`.
fn random_smooth(rng: &mut ChaCha8Rng, n: usize) -> ScalarField {
    let a0: f64 = rng.gen_range(-1.0..1.0);
    let terms: Vec<(f64, Vec<f64>, f64)> = (0..3)
        .map(|_| {
            let a = rng.gen_range(-1.0..1.0);
            let b = (0..n).map(|_| rng.gen_range(-3.0..3.0) * std::f64::consts::PI).collect();
            let c = rng.gen_range(0.0..std::f64::consts::TAU);
            (a, b, c)
        })
        .collect();
    ScalarField::from_fn(move |p| {
        a0 + terms
            .iter()
            .map(|(a, b, c)| a * (b.iter().zip(p).map(|(u, v)| u * v).sum::<f64>() + c).sin())
            .sum::<f64>()
    })
}

fn unfold_check(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = ctx.problem()?;
    ctx.first_eps()?;
    let cfg = ctx.cfg;
    let n = p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f1 = random_smooth(&mut rng, n);
    let f2 = random_smooth(&mut rng, n);
    let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let chart = p.chart();
    let metric = p.chart_metric();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut ucm_one = Vec::new();
    for &eps in &cfg.eps {
        let ucfg = UnfoldConfig::new(eps, cfg.cells_per_eps, p.cell_edge().to_vec())?;
        let global = unfold_global(&f1, &p.atlas, &ucfg)?;
        let grid = chart_grid(&p.atlas, 0, &ucfg)?;
        let g1 = GridFunction::from_field(&chart.id, grid.clone(), BoundaryKind::Free, &f1.pushforward(chart.map()))?;
        let g2 = GridFunction::from_field(&chart.id, grid, BoundaryKind::Free, &f2.pushforward(chart.map()))?;

        let mix = g1.zip_with(&g2, |u, v| a * u + b * v)?;
        let lin = unfold_local(&mix, &ucfg)?
            .combine(1.0, &unfold_local(&g1, &ucfg)?.combine(a, &unfold_local(&g2, &ucfg)?, b)?, -1.0)?
            .max_abs();
        let grad_x = check_gradient_exchange(&g1, &metric, &ucfg)?;
        let v = grad_m(&g2, &metric)?;
        let div_x = check_divergence_exchange(&v, &metric, &ucfg)?;
        let w = grad_m(&g1, &metric)?;
        let (mgap, mscale) = check_metric_exchange(&w, &v, &metric, &ucfg)?;
        let metric_rel = if mscale > 0.0 { mgap / mscale } else { mgap };
        let ucm = ucm_residual_atlas(&f1, &p.metric, &p.atlas, &ucfg)?;
        let one = ucm_residual_atlas(&ScalarField::constant(1.0), &p.metric, &p.atlas, &ucfg)?;
        ucm_one.push(one.residual);
        let ratios: Vec<Value> = [("1", NormP::One), ("2", NormP::Two), ("inf", NormP::Inf)]
            .into_iter()
            .map(|(name, np)| -> Result<Value, Failure> {
                let r = norm_ratio(&g1, &metric, &ucfg, np)?;
                Ok(json!({"p": name, "ratio": r.ratio.map(num), "bound": r.bound, "within_bound": r.within_bound()}))
            })
            .collect::<Result<_, _>>()?;

        let checks = [
            ("overlap_gap", global.overlap_gap, OVERLAP_TOL),
            ("linearity_gap", lin, EXCHANGE_TOL * mix.max_abs().max(1.0)),
            ("gradient_exchange", grad_x.relative_interior(), EXCHANGE_TOL),
            ("divergence_exchange", div_x.relative_interior(), EXCHANGE_TOL),
            ("metric_exchange", metric_rel, EXCHANGE_TOL),
        ];
        for (name, v, tol) in checks {
            if !(v <= tol) {
                failures.push(format!("eps = {eps}: {name} = {v:e} exceeds {tol:e}"));
            }
        }
        results.push(json!({
            "eps": eps,
            "overlap_gap": global.overlap_gap,
            "overlap_samples": global.overlap_samples,
            "excluded_cells": global.field.excluded_cells.len(),
            "linearity_gap": lin,
            "gradient_exchange": {"interior": grad_x.interior, "boundary": grad_x.boundary, "scale": grad_x.scale},
            "divergence_exchange": {"interior": div_x.interior, "boundary": div_x.boundary, "scale": div_x.scale},
            "metric_exchange": {"gap": mgap, "scale": mscale},
            "ucm": {"integral": ucm.integral, "unfolded": ucm.unfolded, "residual": ucm.residual, "l1": ucm.l1},
            "ucm_constant_one": {"integral": one.integral, "unfolded": one.unfolded, "residual": one.residual},
            "norm_ratios": ratios,
        }));
    }
    let decreasing = ucm_one.windows(2).all(|w| w[1] <= w[0]);
    ctx.json(
        "unfold_check.json",
        &json!({
            "seed": cfg.seed,
            "tolerances": {"overlap": OVERLAP_TOL, "exchange": EXCHANGE_TOL},
            "results": results,
            "ucm_constant_one_nonincreasing": decreasing,
            "passed": failures.is_empty(),
            "failures": failures,
        }),
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric("unfolding_identity", failures))
    }
}

fn equivalence(ctx: &mut Ctx) -> Result<(), Failure> {
    let p = ctx.problem()?;
    let cfg = ctx.cfg;
    let tc = cfg
        .transform
        .as_ref()
        .ok_or_else(|| Failure::validation("config", vec!["equivalence needs a `transform` block".into()]))?;
    let t = cfg.build_transform(tc)?;
    let opts = InvarianceOptions {
        eps: cfg.eps.first().copied().unwrap_or(0.125),
        cells_per_eps: cfg.cells_per_eps,
        n_y: cfg.n_y,
        samples: cfg.macro_samples,
        points: cfg.grid_points,
        tol: cfg.tol,
    };
    let start = Instant::now();
    let report = check_invariance(&p, &t, opts)?;
    ctx.timings.insert("invariance_seconds".into(), json!(start.elapsed().as_secs_f64()));

    // Generalized cell problems at the first chart corner, one per direction.
    let g_y = p.chart_metric().eval(&p.chart().lo)?;
    let g_z = cfg.target_metric();
    let n = p.dim();
    let mut cell_checks = Vec::new();
    let mut failures: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} = {:e} (tolerance {:e})", c.name, c.value, c.tol))
        .collect();
    for i in 0..n {
        let q = VectorField::new((0..n).map(|k| ScalarField::constant(if k == i { 1.0 } else { 0.0 })).collect());
        let r = check_cell_transform(&p.coefficient, &g_y, g_z.as_ref(), &t, &q, cfg.n_y, cfg.tol.min(1e-10))?;
        for (name, v) in [("sol_gap", r.sol_gap), ("grad_gap", r.grad_gap)] {
            if !(v <= 1e-6) {
                failures.push(format!("cell direction {}: {name} = {v:e} (tolerance 1e-6)", i + 1));
            }
        }
        cell_checks.push(json!({
            "direction": i + 1,
            "lambda": r.lambda,
            "lambda_gap": r.lambda_gap,
            "sol_gap": r.sol_gap,
            "grad_gap": r.grad_gap,
            "w_max": r.w_max,
        }));
    }
    let doc = json!({
        "transform": report.transform,
        "matrix": matrix_json(&t.matrix()),
        "lambda": report.lambda,
        "eigenvalues_y": report.eigenvalues_y,
        "eigenvalues_z": report.eigenvalues_z,
        "levels": serde_json::to_value(&report.levels).expect("serializable"),
        "checks": serde_json::to_value(&report.checks).expect("serializable"),
        "cell_checks": cell_checks,
        "passed": failures.is_empty(),
        "failures": failures,
    });
    ctx.json("equivalence.json", &doc)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric("invariance_violation", failures))
    }
}

/// Effective tensors at explicit base points; exposed for tests and scripts.
pub fn tensors_at(coef: &CoefficientField, p: &ProblemSpec, xs: &[Vec<f64>], n_y: usize, tol: f64) -> Result<Vec<Value>, Error> {
    let pts = effective_field(coef, &p.chart_metric(), xs, n_y, tol)?;
    Ok(pts
        .iter()
        .map(|pt| json!({"x": pt.x, "B": matrix_json(&pt.tensor.b), "B_tilde": matrix_json(&pt.tensor.b_tilde)}))
        .collect())
}
