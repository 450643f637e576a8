//! Geometric V-cycle over the refinement hierarchy with re-discretized coarse operators.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mesh::{directions, RefinedGrid};
use crate::operators::Operator;
use crate::oracle::{dof_numbering, SparseMatrix};

/// Linear interpolation from level `ℓ` to `ℓ + 1` (same macro mesh), slot vectors.
pub fn prolongate(coarse: &RefinedGrid, fine: &RefinedGrid, uc: &[f64]) -> Result<Vec<f64>> {
    check_pair(coarse, fine)?;
    let mut uf = vec![0.0; fine.num_slots()];
    let (lc, lf) = (coarse.lattice(), fine.lattice());
    let (pc, pf) = (coarse.slots_per_macro(), fine.slots_per_macro());
    let pairs = parity_pairs(fine);
    for t in 0..fine.num_macros() {
        let src = &uc[t * pc..(t + 1) * pc];
        let dst = &mut uf[t * pf..(t + 1) * pf];
        for (k, p) in lf.points().enumerate() {
            let par = parity(p);
            if par == 0 {
                dst[k] = src[lc.index_of([p[0] / 2, p[1] / 2, p[2] / 2])];
            } else {
                let d = pairs[par];
                let a = lc.index_of([(p[0] - d[0]) / 2, (p[1] - d[1]) / 2, (p[2] - d[2]) / 2]);
                let b = lc.index_of([(p[0] + d[0]) / 2, (p[1] + d[1]) / 2, (p[2] + d[2]) / 2]);
                dst[k] = 0.5 * (src[a] + src[b]);
            }
        }
    }
    Ok(uf)
}

/// Transpose of [`prolongate`] on global vectors; Dirichlet entries of the result are zero.
pub fn restrict(fine: &RefinedGrid, coarse: &RefinedGrid, rf: &[f64]) -> Result<Vec<f64>> {
    check_pair(coarse, fine)?;
    let mut rc = vec![0.0; coarse.num_slots()];
    let (lc, lf) = (coarse.lattice(), fine.lattice());
    let (pc, pf) = (coarse.slots_per_macro(), fine.slots_per_macro());
    let pairs = parity_pairs(fine);
    for t in 0..fine.num_macros() {
        let src = &rf[t * pf..(t + 1) * pf];
        let base = t * pf;
        let dst = &mut rc[t * pc..(t + 1) * pc];
        for (k, p) in lf.points().enumerate() {
            let v = src[k] / fine.multiplicity(base + k) as f64;
            let par = parity(p);
            if par == 0 {
                dst[lc.index_of([p[0] / 2, p[1] / 2, p[2] / 2])] += v;
            } else {
                let d = pairs[par];
                let a = lc.index_of([(p[0] - d[0]) / 2, (p[1] - d[1]) / 2, (p[2] - d[2]) / 2]);
                let b = lc.index_of([(p[0] + d[0]) / 2, (p[1] + d[1]) / 2, (p[2] + d[2]) / 2]);
                dst[a] += 0.5 * v;
                dst[b] += 0.5 * v;
            }
        }
    }
    for k in 0..coarse.num_shared() {
        let (_, slots) = coarse.shared_group(k);
        let sum: f64 = if coarse.is_dirichlet(slots[0] as usize) { 0.0 } else { slots.iter().map(|&s| rc[s as usize]).sum() };
        for &s in slots {
            rc[s as usize] = sum;
        }
    }
    Ok(rc)
}

fn check_pair(coarse: &RefinedGrid, fine: &RefinedGrid) -> Result<()> {
    if fine.level() != coarse.level() + 1 || fine.num_macros() != coarse.num_macros() || fine.dim() != coarse.dim() {
        return Err(Error::Level(format!("levels {} -> {} are not nested", coarse.level(), fine.level())));
    }
    Ok(())
}

fn parity(p: [i32; 3]) -> usize {
    (p[0] & 1 | (p[1] & 1) << 1 | (p[2] & 1) << 2) as usize
}

/// For each parity class, the stencil direction whose midpoint carries it.
fn parity_pairs(grid: &RefinedGrid) -> [[i32; 3]; 8] {
    let mut out = [[0; 3]; 8];
    for d in directions(grid.dim()) {
        out[parity([d[0].rem_euclid(2), d[1].rem_euclid(2), d[2].rem_euclid(2)])] = *d;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stop {
    Iters(usize),
    /// Stop once `r_i ≤ factor · r_0`.
    Drop(f64),
}

impl Stop {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad stop criterion `{s}` (iters:N or drop:F)"));
        let (k, v) = s.split_once(':').ok_or_else(bad)?;
        match k.trim() {
            "iters" => Ok(Stop::Iters(v.trim().parse().map_err(|_| bad())?)),
            "drop" => Ok(Stop::Drop(v.trim().parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MgConfig {
    pub pre: usize,
    pub post: usize,
    pub omega: f64,
    pub coarse_tol: f64,
    pub coarse_level: usize,
    pub stop: Stop,
    pub max_iters: usize,
}

impl Default for MgConfig {
    fn default() -> Self {
        MgConfig { pre: 3, post: 3, omega: 1.0, coarse_tol: 1e-12, coarse_level: 0, stop: Stop::Iters(10), max_iters: 100 }
    }
}

impl MgConfig {
    /// Applies one `key=value` setting; unknown keys are reported.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")));
        let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")));
        match key {
            "cycle" => {
                if !value.eq_ignore_ascii_case("V") {
                    return Err(Error::Unsupported(format!("cycle `{value}`")));
                }
            }
            "pre" => self.pre = int(value)?,
            "post" => self.post = int(value)?,
            "omega" | "sor" => self.omega = num(value)?,
            "coarse_tol" => self.coarse_tol = num(value)?,
            "coarse_level" => self.coarse_level = int(value)?,
            "stop" => self.stop = Stop::parse(value)?,
            "max_iters" => self.max_iters = int(value)?,
            _ => return Err(Error::Config(format!("unknown solver key `{key}`"))),
        }
        Ok(())
    }
}

enum Coarse {
    Empty,
    Dense { lu: Vec<f64>, piv: Vec<usize>, n: usize },
    Cg { a: SparseMatrix, tol: f64 },
}

/// Operators on levels `coarse_level..=fine_level` plus the coarse solver.
pub struct Hierarchy {
    ops: Vec<Operator>,
    coarse: Coarse,
    dof: Vec<usize>,
}

impl Hierarchy {
    /// Builds one operator per level with `make` (coefficients re-sampled per level).
    pub fn new<F>(mesh: Arc<crate::mesh::MacroMesh>, coarse_level: usize, fine_level: usize, coarse_tol: f64, make: F) -> Result<Self>
    where
        F: Fn(Arc<RefinedGrid>) -> Result<Operator>,
    {
        if coarse_level > fine_level {
            return Err(Error::Level(format!("coarse level {coarse_level} above fine level {fine_level}")));
        }
        let mut ops = Vec::new();
        for l in coarse_level..=fine_level {
            ops.push(make(Arc::new(RefinedGrid::new(mesh.clone(), l)))?);
        }
        Self::from_operators(ops, coarse_tol)
    }

    pub fn from_operators(ops: Vec<Operator>, coarse_tol: f64) -> Result<Self> {
        let g0 = ops[0].grid().clone();
        let a = ops[0].assemble();
        let (dof, n) = dof_numbering(&g0);
        let coarse = if n == 0 {
            Coarse::Empty
        } else if n <= 500 {
            let (lu, piv) = lu_factor(&a.to_dense())?;
            Coarse::Dense { lu, piv, n }
        } else {
            Coarse::Cg { a, tol: coarse_tol }
        };
        Ok(Hierarchy { ops, coarse, dof })
    }

    pub fn fine(&self) -> &Operator {
        self.ops.last().unwrap()
    }
    pub fn operators(&self) -> &[Operator] {
        &self.ops
    }
    pub fn set_parallel(&mut self, on: bool) {
        for op in &mut self.ops {
            op.set_parallel(on);
        }
    }

    fn coarse_solve(&self, u: &mut [f64], f: &[f64]) -> Result<()> {
        let op = &self.ops[0];
        let g = op.grid();
        let r = op.residual(u, f);
        let mut b = vec![0.0; match &self.coarse {
            Coarse::Empty => return Ok(()),
            Coarse::Dense { n, .. } => *n,
            Coarse::Cg { a, .. } => a.n,
        }];
        for s in 0..g.num_slots() {
            let d = self.dof[g.global_id(s)];
            if d != usize::MAX {
                b[d] = r[s];
            }
        }
        let e = match &self.coarse {
            Coarse::Dense { lu, piv, n } => lu_solve(lu, piv, *n, &b),
            Coarse::Cg { a, tol } => cg(a, &b, *tol, 10 * a.n.max(100)),
            Coarse::Empty => unreachable!(),
        };
        for s in 0..g.num_slots() {
            let d = self.dof[g.global_id(s)];
            if d != usize::MAX {
                u[s] += e[d];
            }
        }
        Ok(())
    }

    fn cycle(&self, level: usize, u: &mut [f64], f: &[f64], cfg: &MgConfig) -> Result<()> {
        if level == 0 {
            return self.coarse_solve(u, f);
        }
        let op = &self.ops[level];
        op.gauss_seidel(u, f, cfg.pre, cfg.omega)?;
        let r = op.residual(u, f);
        let cg = self.ops[level - 1].grid();
        let rc = restrict(op.grid(), cg, &r)?;
        let mut ec = vec![0.0; cg.num_slots()];
        self.cycle(level - 1, &mut ec, &rc, cfg)?;
        let ef = prolongate(cg, op.grid(), &ec)?;
        for (x, e) in u.iter_mut().zip(&ef) {
            *x += e;
        }
        op.gauss_seidel(u, f, cfg.post, cfg.omega)
    }

    /// One V(pre, post) cycle on the finest level.
    pub fn vcycle(&self, u: &mut [f64], f: &[f64], cfg: &MgConfig) -> Result<()> {
        self.cycle(self.ops.len() - 1, u, f, cfg)
    }

    /// Scaled discrete L2 norm `sqrt(h^d Σ r_i²)` over global nodes, `h = 2^-ℓ`.
    pub fn norm(&self, r: &[f64]) -> f64 {
        let g = self.fine().grid();
        let h = 1.0 / g.n() as f64;
        let mut s = 0.0;
        for (k, &v) in r.iter().enumerate() {
            if g.is_owner(k) {
                s += v * v;
            }
        }
        (h.powi(g.dim() as i32) * s).sqrt()
    }

    /// Iterates V-cycles from `u` until the stop criterion holds.
    pub fn solve(&self, u: &mut [f64], f: &[f64], cfg: &MgConfig) -> Result<SolveReport> {
        let t0 = Instant::now();
        let op = self.fine();
        let mut res = vec![self.norm(&op.residual(u, f))];
        let mut grow = 0;
        let mut diverged = false;
        let target = match cfg.stop {
            Stop::Iters(n) => (n, 0.0),
            Stop::Drop(d) => (cfg.max_iters, d * res[0]),
        };
        if res[0] > 0.0 {
            for i in 0..target.0 {
                if let Stop::Drop(_) = cfg.stop {
                    if res[i] <= target.1 {
                        break;
                    }
                }
                self.vcycle(u, f, cfg)?;
                let r = self.norm(&op.residual(u, f));
                grow = if r > res[i] { grow + 1 } else { 0 };
                res.push(r);
                if grow >= 3 || !r.is_finite() {
                    diverged = true;
                    break;
                }
                if r == 0.0 {
                    break;
                }
            }
        }
        let iters = res.len() - 1;
        let converged = match cfg.stop {
            Stop::Iters(_) => !diverged,
            Stop::Drop(d) => res[iters] <= d * res[0],
        };
        Ok(SolveReport { rho: rate(&res), residuals: res, iters, seconds: t0.elapsed().as_secs_f64(), diverged, converged })
    }
}

/// `ρ = (r_{i*} / r_5)^{1/(i* − 5)}`, defined for `i* > 5`.
pub fn rate(res: &[f64]) -> Option<f64> {
    let i = res.len() - 1;
    if i <= 5 || res[5] <= 0.0 {
        return None;
    }
    Some((res[i] / res[5]).powf(1.0 / (i - 5) as f64))
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    /// `r^(0), r^(1), …`
    pub residuals: Vec<f64>,
    pub iters: usize,
    pub rho: Option<f64>,
    pub seconds: f64,
    pub diverged: bool,
    pub converged: bool,
}

/// Dense LU with partial pivoting, row-major.
pub fn lu_factor(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = a.len();
    let mut m: Vec<f64> = a.iter().flatten().copied().collect();
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i * n + k].abs().partial_cmp(&m[j * n + k].abs()).unwrap()).unwrap();
        if m[p * n + k] == 0.0 {
            return Err(Error::ZeroDiagonal(k));
        }
        if p != k {
            for j in 0..n {
                m.swap(k * n + j, p * n + j);
            }
            piv.swap(k, p);
        }
        let inv = 1.0 / m[k * n + k];
        for i in k + 1..n {
            let l = m[i * n + k] * inv;
            m[i * n + k] = l;
            if l != 0.0 {
                for j in k + 1..n {
                    m[i * n + j] -= l * m[k * n + j];
                }
            }
        }
    }
    Ok((m, piv))
}

pub fn lu_solve(m: &[f64], piv: &[usize], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = piv.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for j in 0..i {
            x[i] -= m[i * n + j] * x[j];
        }
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            x[i] -= m[i * n + j] * x[j];
        }
        x[i] /= m[i * n + i];
    }
    x
}

/// Conjugate gradients to relative residual `tol`.
pub fn cg(a: &SparseMatrix, b: &[f64], tol: f64, max_iters: usize) -> Vec<f64> {
    let n = a.n;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut rr = dot(&r, &r);
    let stop = tol * tol * rr;
    let mut ap = vec![0.0; n];
    for _ in 0..max_iters {
        if rr <= stop || rr == 0.0 {
            break;
        }
        a.matvec_into(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr1 = dot(&r, &r);
        let beta = rr1 / rr;
        rr = rr1;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}
