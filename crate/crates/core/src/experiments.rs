//! Experiment drivers: configuration, runs and CSV tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::analysis::{eoc, run_case, CaseResult, ErrorRow, ManufacturedCase, RhsMode, RunOptions};
use crate::coefficients::{Coefficient, CoefficientField};
use crate::costmodel::{analytic_count, measured_count, traffic, FlopCount};
use crate::error::{Error, Result};
use crate::mesh::{directions, Diagonal, MacroMesh, RefinedGrid};
use crate::multigrid::{MgConfig, Stop};
use crate::operators::{Operator, Variant};
use crate::oracle::assemble_global;

pub const EXPERIMENTS: [&str; 8] = ["conv2d", "conv3d_scalar", "conv3d_tensor", "eigen2d", "repro3d", "cost", "cylinder", "stencil"];

pub const ANALYSIS_HEADER: [&str; 14] = [
    "case",
    "variant",
    "level",
    "dofs",
    "err_l2_discrete",
    "err_l2_quad",
    "err_h1",
    "eoc_l2",
    "eoc_h1",
    "rho",
    "iters",
    "tts_seconds",
    "flops_add",
    "flops_mul",
];

const SOLVER_KEYS: [&str; 8] = ["cycle", "pre", "post", "omega", "coarse_tol", "coarse_level", "stop", "max_iters"];

/// `key=value` settings from a config file and the command line (later wins).
#[derive(Clone, Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.set(line).map_err(|_| Error::Parse { line: n + 1, msg: format!("expected key=value, found `{line}`") })?;
        }
        Ok(c)
    }

    pub fn set(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, found `{kv}`")))?;
        self.values.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn check(&self, allowed: &[&str]) -> Result<()> {
        for k in self.values.keys() {
            if !allowed.contains(&k.as_str()) && !SOLVER_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}` (allowed: {})", allowed.join(", "))));
            }
        }
        Ok(())
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("1" | "true" | "yes" | "on") => Ok(true),
            Some("0" | "false" | "no" | "off") => Ok(false),
            Some(v) => Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn list(&self, key: &str, default: &str) -> Vec<String> {
        split_list(self.get(key).unwrap_or(default))
    }

    fn floats(&self, key: &str, default: &str) -> Result<Vec<f64>> {
        self.list(key, default)
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad value `{s}` for `{key}`"))))
            .collect()
    }

    /// `a..b` (inclusive) or a comma list.
    pub fn levels(&self, default: &str) -> Result<Vec<usize>> {
        let s = self.get("levels").unwrap_or(default);
        let bad = || Error::Config(format!("bad value `{s}` for `levels`"));
        let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            (a..=b).collect()
        } else {
            s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        if out.is_empty() || out.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("`levels` must be increasing, found `{s}`")));
        }
        Ok(out)
    }

    fn variants(&self, default: &str) -> Result<Vec<Variant>> {
        self.list("variants", default).iter().map(|s| Variant::parse(s)).collect()
    }

    /// Solver settings over the given defaults.
    pub fn solver(&self, defaults: MgConfig) -> Result<MgConfig> {
        let mut c = defaults;
        for k in SOLVER_KEYS {
            if let Some(v) = self.get(k) {
                c.set(k, v)?;
            }
        }
        Ok(c)
    }
}

/// Splits on commas outside parentheses.
fn split_list(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// Built-in macro mesh by name, or an ASCII mesh file.
pub fn load_mesh(spec: &str) -> Result<MacroMesh> {
    Ok(match spec {
        "square" => MacroMesh::unit_square(),
        "square3x3" => MacroMesh::square_grid(3, 3, Diagonal::Backward),
        "obtuse" => MacroMesh::obtuse_square(),
        "cube6" => MacroMesh::unit_cube_6(),
        "cube12" => MacroMesh::unit_cube_12(),
        "tet" => MacroMesh::reference_tetrahedron(),
        "regular_tet" => MacroMesh::regular_tetrahedron(),
        path => MacroMesh::parse(&std::fs::read_to_string(path)?)?,
    })
}

#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.header)?;
        for r in &self.rows {
            wr.write_record(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub tables: Vec<Table>,
    /// Some multigrid solve diverged.
    pub diverged: bool,
}

impl Report {
    /// Writes `<dir>/<table>.csv` for every table.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for t in &self.tables {
            t.write_csv(std::fs::File::create(dir.join(format!("{}.csv", t.name)))?)?;
        }
        Ok(())
    }
}

fn sci(x: f64) -> String {
    format!("{x:.6e}")
}

fn opt(x: Option<f64>, f: impl Fn(f64) -> String) -> String {
    x.map(f).unwrap_or_default()
}

/// Scaling of the nodal error vector reported as `err_l2_discrete`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscreteNorm {
    /// `sqrt(h^d Σ e_i²)`
    H,
    /// `sqrt(Σ e_i² / N)` over the `N` unknowns
    Rms,
}

impl DiscreteNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(DiscreteNorm::H),
            "rms" => Ok(DiscreteNorm::Rms),
            _ => Err(Error::Config(format!("bad value `{s}` for `l2` (h or rms)"))),
        }
    }

    fn pick(self, e: &ErrorRow) -> f64 {
        match self {
            DiscreteNorm::H => e.l2_discrete,
            DiscreteNorm::Rms => e.l2_rms,
        }
    }
}

/// One analysis row per level; `labels` are the level numbers printed.
fn convergence_rows(table: &mut Table, case: &str, variant: &Variant, labels: &[usize], results: &[CaseResult], dim: usize, norm: DiscreteNorm) {
    let l2: Vec<f64> = results.iter().map(|r| r.errors.l2_quad.unwrap_or(norm.pick(&r.errors))).collect();
    let h1: Vec<f64> = results.iter().map(|r| r.errors.h1.unwrap_or(0.0)).collect();
    let (e2, e1) = (eoc(&l2), eoc(&h1));
    let flops = analytic_count(variant, dim).ok();
    for (k, r) in results.iter().enumerate() {
        table.rows.push(vec![
            case.to_string(),
            variant.name(),
            labels[k].to_string(),
            r.dofs.to_string(),
            sci(norm.pick(&r.errors)),
            opt(r.errors.l2_quad, sci),
            opt(r.errors.h1, sci),
            opt(e2[k], |x| format!("{x:.3}")),
            opt(e1[k], |x| format!("{x:.3}")),
            opt(r.report.rho, |x| format!("{x:.4}")),
            r.report.iters.to_string(),
            format!("{:.6}", r.report.seconds),
            opt(flops.map(|f: FlopCount| f.add as f64), |x| format!("{x}")),
            opt(flops.map(|f: FlopCount| f.mul as f64), |x| format!("{x}")),
        ]);
    }
}

struct Sweep<'a> {
    name: &'a str,
    cases: Vec<ManufacturedCase>,
    variants: Vec<Variant>,
    labels: Vec<usize>,
    /// refinement level = label + offset
    offset: usize,
    opts: RunOptions,
    norm: DiscreteNorm,
}

fn sweep(s: Sweep) -> Result<Report> {
    let mut table = Table::new(s.name, &ANALYSIS_HEADER);
    let mut diverged = false;
    for case in &s.cases {
        for v in &s.variants {
            let mut results = Vec::new();
            for &l in &s.labels {
                log::info!("{} {} level {}", case.name, v.name(), l);
                let r = run_case(case, v, l + s.offset, &s.opts)?;
                diverged |= r.report.diverged;
                results.push(r);
            }
            convergence_rows(&mut table, &case.name, v, &s.labels, &results, case.dim, s.norm);
        }
    }
    Ok(Report { tables: vec![table], diverged })
}

fn run_options(cfg: &Config, solver: MgConfig, quad: bool) -> Result<RunOptions> {
    Ok(RunOptions {
        solver: cfg.solver(solver)?,
        quadrature_errors: cfg.flag("quad", quad)?,
        parallel: cfg.flag("parallel", false)?,
        repeats: cfg.num("repeats", 3)?,
    })
}

fn override_case(cfg: &Config, mut c: ManufacturedCase) -> Result<ManufacturedCase> {
    if let Some(m) = cfg.get("mesh") {
        let mesh = load_mesh(m)?;
        if mesh.dim() != c.dim {
            return Err(Error::Dimension { expected: c.dim, got: mesh.dim() });
        }
        c.mesh = Arc::new(mesh);
    }
    if let Some(r) = cfg.get("rhs") {
        c.rhs = RhsMode::parse(r)?;
    }
    Ok(c)
}

const CONV_KEYS: [&str; 9] = ["m", "levels", "variants", "repeats", "parallel", "quad", "mesh", "rhs", "l2"];

fn norm(cfg: &Config, default: DiscreteNorm) -> Result<DiscreteNorm> {
    cfg.get("l2").map_or(Ok(default), DiscreteNorm::parse)
}

/// Runs the named experiment. `stencil` expects the sub-command `dump` as its first word.
pub fn run(name: &str, cfg: &Config) -> Result<Report> {
    match name {
        "conv2d" => {
            cfg.check(&CONV_KEYS)?;
            let cases = cfg.floats("m", "2,4,8")?.into_iter().map(|m| override_case(cfg, ManufacturedCase::rational_2d(m))).collect::<Result<_>>()?;
            let solver = MgConfig { stop: Stop::Drop(1e-11), max_iters: 60, ..MgConfig::default() };
            sweep(Sweep {
                name,
                cases,
                variants: cfg.variants("midpoint,nodal,scaling")?,
                labels: cfg.levels("0..4")?,
                offset: 1,
                opts: run_options(cfg, solver, true)?,
                norm: norm(cfg, DiscreteNorm::H)?,
            })
        }
        "conv3d_scalar" => {
            cfg.check(&CONV_KEYS)?;
            let cases = cfg
                .floats("m", "3,8")?
                .into_iter()
                .map(|m| override_case(cfg, ManufacturedCase { rhs: RhsMode::Quadrature5, ..ManufacturedCase::rational_3d(m) }))
                .collect::<Result<_>>()?;
            sweep(Sweep {
                name,
                cases,
                variants: cfg.variants("nodal,hybrid(W_V+W_E),scaling")?,
                labels: cfg.levels("1..4")?,
                offset: 2,
                opts: run_options(cfg, MgConfig { stop: Stop::Iters(10), ..MgConfig::default() }, false)?,
                norm: norm(cfg, DiscreteNorm::Rms)?,
            })
        }
        "conv3d_tensor" => {
            cfg.check(&CONV_KEYS[1..])?;
            sweep(Sweep {
                name,
                cases: vec![override_case(cfg, ManufacturedCase::tensor_3d())?],
                variants: cfg.variants("nodal,hybrid(W_V+W_E)")?,
                labels: cfg.levels("1..4")?,
                offset: 2,
                opts: run_options(cfg, MgConfig { stop: Stop::Drop(1e-9), ..MgConfig::default() }, false)?,
                norm: norm(cfg, DiscreteNorm::H)?,
            })
        }
        "cylinder" => {
            cfg.check(&CONV_KEYS[1..])?;
            sweep(Sweep {
                name,
                cases: vec![override_case(cfg, ManufacturedCase::cylinder())?],
                variants: cfg.variants("nodal,hybrid(W_V+W_E)")?,
                labels: cfg.levels("1..4")?,
                offset: 1,
                opts: run_options(cfg, MgConfig { stop: Stop::Drop(1e-8), ..MgConfig::default() }, false)?,
                norm: norm(cfg, DiscreteNorm::H)?,
            })
        }
        "repro3d" => {
            cfg.check(&CONV_KEYS[1..])?;
            let solver = MgConfig { stop: Stop::Drop(1e-14), max_iters: 60, ..MgConfig::default() };
            sweep(Sweep {
                name,
                cases: vec![override_case(cfg, ManufacturedCase::affine_3d())?],
                variants: cfg.variants("nodal,scaling,hybrid(W_V),hybrid(W_E),hybrid(W_V+W_E),hybrid(W)")?,
                labels: cfg.levels("4")?,
                offset: 0,
                opts: run_options(cfg, solver, false)?,
                norm: norm(cfg, DiscreteNorm::H)?,
            })
        }
        "eigen2d" => eigen2d(cfg),
        "cost" => cost(cfg),
        "stencil" | "stencil dump" => stencil_dump(cfg),
        _ => Err(Error::Config(format!("unknown experiment `{name}` (one of: {})", EXPERIMENTS.join(", ")))),
    }
}

fn eigen2d(cfg: &Config) -> Result<Report> {
    cfg.check(&["eta", "m", "levels", "variants", "mesh", "dense_limit"])?;
    let mesh = Arc::new(load_mesh(cfg.get("mesh").unwrap_or("obtuse"))?);
    let m: f64 = cfg.num("m", 50.0)?;
    let mut table = Table::new("eigen2d", &["case", "variant", "eta", "level", "dofs", "lambda_min", "lambda_max", "certified", "marked_macros"]);
    for eta in cfg.floats("eta", "1,10,100,1000")? {
        let coef = Coefficient::Sigmoid2d { m, eta };
        for v in cfg.variants("scaling,scaling_ma2,nodal")? {
            for l in cfg.levels("0..5")? {
                let grid = Arc::new(RefinedGrid::new(mesh.clone(), l));
                let field = CoefficientField::sample(&coef, &grid)?;
                let a = assemble_global(&grid, &field, Some(&coef), &v, true)?;
                let e = crate::oracle::extreme_eigenvalues_with(&a, cfg.num("dense_limit", 1000)?)?;
                let marked = if v == Variant::ScalingMa2 {
                    let op = Operator::with_field(grid.clone(), Arc::new(field), v.clone())?;
                    op.ma2_info().iter().filter(|i| i.marked).count().to_string()
                } else {
                    String::new()
                };
                table.rows.push(vec![
                    "sigmoid2d".into(),
                    v.name(),
                    eta.to_string(),
                    l.to_string(),
                    a.n.to_string(),
                    sci(e.min.value),
                    sci(e.max.value),
                    e.certified.to_string(),
                    marked,
                ]);
            }
        }
    }
    Ok(Report { tables: vec![table], diverged: false })
}

fn cost(cfg: &Config) -> Result<Report> {
    cfg.check(&["n"])?;
    let n: u64 = cfg.num("n", 1_000_000)?;
    let mut ops = Table::new("cost_ops", &["approach", "dim", "add", "mul", "total", "measured_add", "measured_mul"]);
    let vs = [Variant::Scaling, Variant::NodalFly, Variant::Constant, Variant::Stored(Box::new(Variant::Scaling))];
    for dim in [2, 3] {
        for v in &vs {
            let a = analytic_count(v, dim)?;
            let m = measured_count(v, dim)?;
            ops.rows.push(vec![
                v.name(),
                dim.to_string(),
                a.add.to_string(),
                a.mul.to_string(),
                a.total().to_string(),
                m.add.to_string(),
                m.mul.to_string(),
            ]);
        }
    }
    let mut bytes = Table::new("cost_traffic", &["approach", "n", "optimistic_bytes", "pessimistic_bytes"]);
    for v in [Variant::Stored(Box::new(Variant::Scaling)), Variant::NodalFly, Variant::Scaling] {
        let (o, p) = traffic(&v, 3, n)?;
        bytes.rows.push(vec![v.name(), n.to_string(), o.to_string(), p.to_string()]);
    }
    Ok(Report { tables: vec![ops, bytes], diverged: false })
}

/// Volume stencils of every macro element; optional MatrixMarket and mesh export.
fn stencil_dump(cfg: &Config) -> Result<Report> {
    cfg.check(&["mesh", "level", "variant", "coef", "mtx", "mesh_out"])?;
    let mesh = Arc::new(load_mesh(cfg.get("mesh").unwrap_or("cube6"))?);
    let dim = mesh.dim();
    let level: usize = cfg.num("level", 2)?;
    let variant = Variant::parse(cfg.get("variant").unwrap_or("constant"))?;
    let coef = Coefficient::parse(cfg.get("coef").unwrap_or("const(1)"))?;
    if let Some(path) = cfg.get("mesh_out") {
        std::fs::write(path, mesh.to_text())?;
    }
    let grid = Arc::new(RefinedGrid::new(mesh, level));
    let op = Operator::new(grid.clone(), &coef, variant.clone())?;
    if let Some(path) = cfg.get("mtx") {
        let a = assemble_global(&grid, op.field(), Some(&coef), &variant, true)?;
        a.write_matrix_market(std::io::BufWriter::new(std::fs::File::create(path)?))?;
    }
    let mut table = Table::new("stencil", &["macro", "node", "dx", "dy", "dz", "weight"]);
    let lat = grid.lattice();
    let full = (1usize << (dim + 1)) - 1;
    let Some(p) = lat.points().find(|&p| lat.class_mask(p) == full) else {
        return Err(Error::Unsupported(format!("level {level} has no volume node")));
    };
    for t in 0..grid.num_macros() {
        let (w, present) = op.slot_weights(t, p);
        let node = lat.index_of(p).to_string();
        let mut center = 0.0;
        for (j, d) in directions(dim).iter().enumerate() {
            if present >> j & 1 == 1 {
                center -= w[j];
                table.rows.push(vec![t.to_string(), node.clone(), d[0].to_string(), d[1].to_string(), d[2].to_string(), format!("{:.17e}", w[j])]);
            }
        }
        table.rows.push(vec![t.to_string(), node, "0".into(), "0".into(), "0".into(), format!("{center:.17e}")]);
    }
    Ok(Report { tables: vec![table], diverged: false })
}
