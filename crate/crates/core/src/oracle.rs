//! Assembled-matrix reference path: element-loop assembly of every operator variant,
//! a CSR matrix type, MatrixMarket export and extreme-eigenvalue diagnostics.
//!
//! The assembly loops over fine elements directly and never touches the stencil tables,
//! so agreement with the matrix-free operators is a real check.

use std::collections::HashMap;
use std::io::Write;

use crate::coefficients::{Coefficient, CoefficientField};
use crate::error::{Error, Result};
use crate::mesh::{Point, PrimitiveKind, RefinedGrid};
use crate::operators::{PrimitiveSet, Variant};
use crate::stencil::{element_mass, element_matrix, lambda_min, Mat4, IDENTITY3};

/// Compressed sparse rows; row `r` belongs to global node `ids[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    pub ids: Vec<usize>,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from unsorted row lists; duplicate columns are summed.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), n);
        let mut row_ptr = vec![0];
        let mut col = Vec::new();
        let mut val = Vec::new();
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            let mut last = usize::MAX;
            for (c, v) in r {
                if c == last {
                    *val.last_mut().unwrap() += v;
                } else {
                    col.push(c);
                    val.push(v);
                    last = c;
                }
            }
            row_ptr.push(col.len());
        }
        SparseMatrix { n, ids: (0..n).collect(), row_ptr, col, val }
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let rows = a
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (j, *v)).collect())
            .collect();
        Self::from_rows(a.len(), rows)
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col[k], self.val[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = &self.col[self.row_ptr[i]..self.row_ptr[i + 1]];
        match r.binary_search(&j) {
            Ok(k) => self.val[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.val[k] * x[self.col[k]];
            }
            *yi = s;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.n]; self.n];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        a
    }

    /// `max |a_ij − a_ji| / max |a_ij|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                scale = scale.max(v.abs());
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    /// `max_i |Σ_j a_ij| / max |a_ij|`.
    pub fn max_row_sum(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..self.n {
            let mut s = 0.0;
            for (_, v) in self.row(i) {
                s += v;
                scale = scale.max(v.abs());
            }
            worst = worst.max(s.abs());
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    /// Infinity norm, an upper bound for the spectral radius.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "% rows are global node ids {}", if self.ids.len() == self.n { "(see ids)" } else { "" })?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Numbers the non-Dirichlet global nodes in global-id order; Dirichlet nodes map to
/// `usize::MAX`.
pub fn dof_numbering(grid: &RefinedGrid) -> (Vec<usize>, usize) {
    let mut dof = vec![usize::MAX; grid.num_global()];
    let mut n = 0;
    for (g, d) in dof.iter_mut().enumerate() {
        if !grid.is_dirichlet_global(g) {
            *d = n;
            n += 1;
        }
    }
    (dof, n)
}

/// Slot vector to one value per global node.
pub fn to_global(grid: &RefinedGrid, u: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; grid.num_global()];
    for (s, &v) in u.iter().enumerate() {
        g[grid.global_id(s)] = v;
    }
    g
}

/// Global vector to a consistent slot vector.
pub fn to_slots(grid: &RefinedGrid, g: &[f64]) -> Vec<f64> {
    (0..grid.num_slots()).map(|s| g[grid.global_id(s)]).collect()
}

/// Free-node vector (as numbered by [`dof_numbering`]) from a slot vector.
pub fn to_dofs(grid: &RefinedGrid, u: &[f64]) -> Vec<f64> {
    let (dof, n) = dof_numbering(grid);
    let mut x = vec![0.0; n];
    for (s, &v) in u.iter().enumerate() {
        let d = dof[grid.global_id(s)];
        if d != usize::MAX {
            x[d] = v;
        }
    }
    x
}

/// Slot vector from free-node values, zero on the Dirichlet boundary.
pub fn from_dofs(grid: &RefinedGrid, x: &[f64]) -> Vec<f64> {
    let (dof, _) = dof_numbering(grid);
    (0..grid.num_slots())
        .map(|s| {
            let d = dof[grid.global_id(s)];
            if d == usize::MAX {
                0.0
            } else {
                x[d]
            }
        })
        .collect()
}

struct FineElement {
    macro_id: usize,
    slots: [usize; 4],
    points: [Point; 4],
}

fn fine_elements(grid: &RefinedGrid) -> Vec<FineElement> {
    let dim = grid.dim();
    let elems = grid.lattice().elements();
    let mut out = Vec::with_capacity(elems.len() * grid.num_macros());
    for t in 0..grid.num_macros() {
        for (v, _) in &elems {
            let mut slots = [0; 4];
            let mut points = [[0.0; 3]; 4];
            for k in 0..=dim {
                slots[k] = grid.slot(t, v[k]);
                points[k] = grid.point(t, v[k]);
            }
            out.push(FineElement { macro_id: t, slots, points });
        }
    }
    out
}

/// Per-edge coefficient modifications of the 2D MA2 safeguard, keyed by the (sorted)
/// slot pair; computed geometrically from the macro triangle.
fn ma2_edges(grid: &RefinedGrid, field: &CoefficientField, fine: &[FineElement]) -> Result<HashMap<(usize, usize), f64>> {
    let mut out = HashMap::new();
    if grid.dim() != 2 {
        return Ok(out);
    }
    let k = field.values();
    let per = grid.slots_per_macro();
    // nodal k_min over the fine elements around each node, inside the macro
    let mut kmin = k.to_vec();
    for e in fine {
        let m = (0..3).map(|i| k[e.slots[i]]).fold(f64::INFINITY, f64::min);
        for i in 0..3 {
            kmin[e.slots[i]] = kmin[e.slots[i]].min(m);
        }
    }
    for t in 0..grid.num_macros() {
        let p = grid.mesh().element_points(t);
        // largest angle via the cosine law
        let len2 = |a: &Point, b: &Point| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        let mut v = 0;
        let mut best = f64::INFINITY;
        for i in 0..3 {
            let (a, b) = (&p[(i + 1) % 3], &p[(i + 2) % 3]);
            let c = (len2(&p[i], a) + len2(&p[i], b) - len2(a, b)) / (2.0 * (len2(&p[i], a) * len2(&p[i], b)).sqrt());
            if c < best {
                best = c;
                v = i;
            }
        }
        if best >= -1e-12 {
            continue;
        }
        let theta = best.clamp(-1.0, 1.0).acos();
        let a12 = -0.5 / theta.tan();
        let lmin = lambda_min(&p)?;
        let gray = [p[(v + 2) % 3][0] - p[(v + 1) % 3][0], p[(v + 2) % 3][1] - p[(v + 1) % 3][1]];
        let glen = (gray[0] * gray[0] + gray[1] * gray[1]).sqrt();
        let is_gray = |a: &Point, b: &Point| {
            let d = [b[0] - a[0], b[1] - a[1]];
            (d[0] * gray[1] - d[1] * gray[0]).abs() <= 1e-9 * glen * (d[0].hypot(d[1]))
        };
        let ke = |a: usize, b: usize| 0.5 * (k[a] + k[b]);
        // k_{e;min}: min over edges of the fine elements containing e
        let mut edge_min: HashMap<(usize, usize), f64> = HashMap::new();
        let mine = fine.iter().filter(|e| e.macro_id == t);
        for e in mine.clone() {
            let m = [(0, 1), (1, 2), (0, 2)].iter().map(|&(a, b)| ke(e.slots[a], e.slots[b])).fold(f64::INFINITY, f64::min);
            for &(a, b) in &[(0, 1), (1, 2), (0, 2)] {
                let key = (e.slots[a].min(e.slots[b]), e.slots[a].max(e.slots[b]));
                let x = edge_min.entry(key).or_insert(f64::INFINITY);
                *x = x.min(m);
            }
        }
        let mut marked = false;
        let mut gray_edges = Vec::new();
        for e in mine {
            for &(a, b) in &[(0, 1), (1, 2), (0, 2)] {
                if is_gray(&e.points[a], &e.points[b]) {
                    let key = (e.slots[a].min(e.slots[b]), e.slots[a].max(e.slots[b]));
                    if (ke(key.0, key.1) - edge_min[&key]) * a12 > edge_min[&key] * lmin {
                        marked = true;
                    }
                    gray_edges.push(key);
                }
            }
        }
        if marked {
            for key in gray_edges {
                debug_assert!(key.0 / per == t);
                out.insert(key, 0.5 * (kmin[key.0] + kmin[key.1]));
            }
        }
    }
    Ok(out)
}

/// Global matrix of `variant` by element loop. With `eliminate` the rows and columns of
/// Dirichlet nodes are dropped and `ids` lists the free nodes; otherwise every global
/// node has a row and Dirichlet rows are identity rows (columns kept), so the matrix acts
/// exactly like the matrix-free operator on global vectors.
pub fn assemble_global(
    grid: &RefinedGrid,
    field: &CoefficientField,
    coef: Option<&Coefficient>,
    variant: &Variant,
    eliminate: bool,
) -> Result<SparseMatrix> {
    let variant = match variant {
        Variant::Stored(v) => v.as_ref(),
        v => v,
    };
    let dim = grid.dim();
    let fine = fine_elements(grid);
    let (dof, nfree) = dof_numbering(grid);
    let nrow = if eliminate { nfree } else { grid.num_global() };
    let map = |g: usize| if eliminate { dof[g] } else { g };
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrow];
    let ma2 = if *variant == Variant::ScalingMa2 {
        if dim == 3 {
            log::warn!("MA2 is only defined in 2D; assembling plain scaling");
        }
        ma2_edges(grid, field, &fine)?
    } else {
        HashMap::new()
    };
    if *variant == Variant::Midpoint && coef.is_none() {
        return Err(Error::Unsupported("midpoint assembly needs the coefficient function".into()));
    }
    for e in &fine {
        // (metric, nodal values) pairs
        let mut parts: Vec<(Mat4, [f64; 4])> = Vec::new();
        match variant {
            Variant::Constant => parts.push((element_matrix(dim, &e.points[..=dim], &IDENTITY3)?, [1.0; 4])),
            Variant::Midpoint => {
                let mut x = [0.0; 3];
                for p in &e.points[..=dim] {
                    for i in 0..3 {
                        x[i] += p[i] / (dim + 1) as f64;
                    }
                }
                let k = coef.unwrap().tensor_f64(&x);
                parts.push((element_matrix(dim, &e.points[..=dim], &k)?, [1.0; 4]));
            }
            _ => {
                for c in &field.components {
                    let mut kv = [0.0; 4];
                    for i in 0..=dim {
                        kv[i] = c.values[e.slots[i]];
                    }
                    parts.push((element_matrix(dim, &e.points[..=dim], &c.metric)?, kv));
                }
            }
        }
        for i in 0..=dim {
            let gi = grid.global_id(e.slots[i]);
            if grid.is_dirichlet_global(gi) {
                continue;
            }
            let r = map(gi);
            let nodal_row = match variant {
                Variant::NodalFly => true,
                Variant::Hybrid(set) => in_set(*set, grid.kind_of_global(gi)),
                _ => false,
            };
            let mut diag = 0.0;
            for j in 0..=dim {
                if j == i {
                    continue;
                }
                let gj = grid.global_id(e.slots[j]);
                let mut a = 0.0;
                for (m, (am, kv)) in parts.iter().enumerate() {
                    let kij = match variant {
                        Variant::Constant | Variant::Midpoint => 1.0,
                        _ if nodal_row => kv[..=dim].iter().sum::<f64>() / (dim + 1) as f64,
                        Variant::ScalingMa2 if m == 0 => {
                            let key = (e.slots[i].min(e.slots[j]), e.slots[i].max(e.slots[j]));
                            ma2.get(&key).copied().unwrap_or(0.5 * (kv[i] + kv[j]))
                        }
                        _ => 0.5 * (kv[i] + kv[j]),
                    };
                    a += kij * am[i][j];
                }
                diag -= a;
                let c = map(gj);
                if c != usize::MAX {
                    rows[r].push((c, a));
                }
            }
            rows[r].push((r, diag));
        }
    }
    if !eliminate {
        for g in 0..grid.num_global() {
            if grid.is_dirichlet_global(g) {
                rows[g].push((g, 1.0));
            }
        }
    }
    let mut m = SparseMatrix::from_rows(nrow, rows);
    if eliminate {
        m.ids = (0..grid.num_global()).filter(|&g| dof[g] != usize::MAX).collect();
    }
    Ok(m)
}

fn in_set(set: PrimitiveSet, kind: PrimitiveKind) -> bool {
    set.contains(kind)
}

/// Consistent mass matrix over all global nodes.
pub fn assemble_mass(grid: &RefinedGrid) -> Result<SparseMatrix> {
    let dim = grid.dim();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); grid.num_global()];
    for e in fine_elements(grid) {
        let m = element_mass(dim, &e.points[..=dim])?;
        for i in 0..=dim {
            let gi = grid.global_id(e.slots[i]);
            for j in 0..=dim {
                rows[gi].push((grid.global_id(e.slots[j]), m[i][j]));
            }
        }
    }
    Ok(SparseMatrix::from_rows(grid.num_global(), rows))
}

// ---------------------------------------------------------------- eigenvalues

/// All eigenvalues of a dense symmetric matrix (Householder tridiagonalization + QL),
/// ascending.
pub fn dense_eigenvalues(a: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = a.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut z: Vec<Vec<f64>> = a.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut z, &mut d, &mut e);
    tqli(&mut d, &mut e, None)?;
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(d)
}

// Householder reduction to tridiagonal form, eigenvalues only.
fn tred2(a: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = a.len();
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[i][k].abs()).sum();
            if scale == 0.0 {
                e[i] = a[i][l];
            } else {
                for k in 0..=l {
                    a[i][k] /= scale;
                    h += a[i][k] * a[i][k];
                }
                let f = a[i][l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i][l] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j][k] * a[i][k];
                    }
                    for k in j + 1..=l {
                        g += a[k][j] * a[i][k];
                    }
                    e[j] = g / h;
                    f += e[j] * a[i][j];
                }
                let hh = f / (h + h);
                let (head, tail) = a.split_at_mut(i);
                let ri = &tail[0];
                for j in 0..=l {
                    let f = ri[j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    let rj = &mut head[j];
                    for k in 0..=j {
                        rj[k] -= f * e[k] + g * ri[k];
                    }
                }
            }
        } else {
            e[i] = a[i][l];
        }
        d[i] = h;
    }
    e[0] = 0.0;
    for i in 0..n {
        d[i] = a[i][i];
    }
}

/// Implicit QL on the tridiagonal (`d` diagonal, `e[i]` couples `i − 1` and `i`);
/// rotations are accumulated into `z` when given.
fn tqli(d: &mut [f64], e: &mut [f64], mut z: Option<&mut Vec<Vec<f64>>>) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::NoConvergence { estimate: d[l], residual: e[l].abs() });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut early = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    early = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if let Some(z) = z.as_deref_mut() {
                    for row in z.iter_mut() {
                        let f = row[i + 1];
                        row[i + 1] = s * row[i] + c * f;
                        row[i] = c * row[i] - s * f;
                    }
                }
            }
            if early {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Envelope (profile) `LDLᵀ` of `P (A − σI) Pᵀ` with a reverse Cuthill–McKee ordering.
pub struct EnvelopeLdl {
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    l: Vec<f64>,
    d: Vec<f64>,
}

/// Reverse Cuthill–McKee permutation (`perm[new] = old`).
pub fn rcm(a: &SparseMatrix) -> Vec<usize> {
    let n = a.n;
    let deg: Vec<usize> = (0..n).map(|i| a.row_ptr[i + 1] - a.row_ptr[i]).collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_deg: Vec<usize> = (0..n).collect();
    by_deg.sort_by_key(|&i| deg[i]);
    for &s in &by_deg {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut head = order.len();
        order.push(s);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut nb: Vec<usize> = a.row(v).map(|(j, _)| j).filter(|&j| !seen[j]).collect();
            nb.sort_by_key(|&j| deg[j]);
            for j in nb {
                seen[j] = true;
                order.push(j);
            }
        }
    }
    order.reverse();
    order
}

impl EnvelopeLdl {
    pub fn factor(a: &SparseMatrix, sigma: f64, perm: &[usize]) -> Self {
        let n = a.n;
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; n];
        for i in 0..n {
            first[i] = a.row(perm[i]).map(|(j, _)| inv[j]).filter(|&j| j <= i).min().unwrap_or(i);
        }
        let mut start = vec![0; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i]);
        }
        let mut l = vec![0.0; start[n]];
        let mut d = vec![0.0; n];
        let mut row = vec![0.0; n];
        let norm = a.norm_inf().max(f64::MIN_POSITIVE);
        for i in 0..n {
            let fi = first[i];
            let mut aii = -sigma;
            for (j, v) in a.row(perm[i]) {
                let jj = inv[j];
                if jj < i {
                    row[jj] = v;
                } else if jj == i {
                    aii += v;
                }
            }
            // row[j] becomes w_j = l_ij d_j = a_ij − Σ_k w_k l_jk
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let lj = &l[start[j]..start[j + 1]];
                let mut s = row[j];
                for k in lo..j {
                    s -= row[k] * lj[k - fj];
                }
                row[j] = s;
            }
            let li = &mut l[start[i]..start[i + 1]];
            let mut di = aii;
            for j in fi..i {
                let lij = row[j] / d[j];
                di -= lij * row[j];
                li[j - fi] = lij;
                row[j] = 0.0;
            }
            if di.abs() < 1e-14 * norm {
                di = if di < 0.0 { -1e-14 * norm } else { 1e-14 * norm };
            }
            d[i] = di;
        }
        EnvelopeLdl { perm: perm.to_vec(), first, start, l, d }
    }

    /// Number of negative pivots, the count of eigenvalues below σ.
    pub fn negative_count(&self) -> usize {
        self.d.iter().filter(|&&x| x < 0.0).count()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut y: Vec<f64> = (0..n).map(|i| b[self.perm[i]]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let li = &self.l[self.start[i]..self.start[i + 1]];
            let mut s = y[i];
            for j in fi..i {
                s -= li[j - fi] * y[j];
            }
            y[i] = s;
        }
        for i in 0..n {
            y[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let li = &self.l[self.start[i]..self.start[i + 1]];
            let yi = y[i];
            for j in fi..i {
                y[j] -= li[j - fi] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
    /// `‖A x − λ x‖ / ‖A‖` for the unit vector `x`.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct Extremes {
    pub min: Eigenpair,
    pub max: Eigenpair,
    /// Both residuals are below `1e-8`.
    pub certified: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn residual(a: &SparseMatrix, lambda: f64, x: &[f64], anorm: f64) -> f64 {
    let ax = a.matvec(x);
    let r: f64 = ax.iter().zip(x).map(|(y, xi)| (y - lambda * xi).powi(2)).sum::<f64>().sqrt();
    r / anorm.max(f64::MIN_POSITIVE)
}

/// Lanczos with full reorthogonalization on `op`; returns the Ritz pair of largest Ritz
/// value once `accept` holds, checking every few steps.
fn lanczos<F: FnMut(&[f64]) -> Vec<f64>>(n: usize, mut op: F, max_steps: usize, mut accept: impl FnMut(f64, &[f64]) -> bool) -> (f64, Vec<f64>) {
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919 % 104729) as f64 / 104729.0)).collect();
    normalize(&mut v);
    let mut best = (0.0, v.clone());
    for step in 0..max_steps.min(n) {
        q.push(v.clone());
        let mut w = op(&v);
        let a = dot(&w, &v);
        alpha.push(a);
        for _ in 0..2 {
            for qk in &q {
                let c = dot(&w, qk);
                for (wi, qi) in w.iter_mut().zip(qk) {
                    *wi -= c * qi;
                }
            }
        }
        let b = normalize(&mut w);
        let last = step + 1 == max_steps.min(n) || b < 1e-14;
        if step % 5 == 4 || last {
            let (vals, vecs) = tridiag_eigen(&alpha, &beta);
            let k = vals.len() - 1;
            let mut x = vec![0.0; n];
            for (j, qj) in q.iter().enumerate() {
                let c = vecs[j][k];
                for (xi, qi) in x.iter_mut().zip(qj) {
                    *xi += c * qi;
                }
            }
            normalize(&mut x);
            best = (vals[k], x);
            if accept(best.0, &best.1) || last {
                break;
            }
        }
        beta.push(b);
        v = w;
    }
    best
}

/// Eigenpairs of a symmetric tridiagonal matrix, ascending; `vecs[row][k]` is
/// component `row` of eigenvector `k`.
fn tridiag_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = alpha.len();
    let mut d = alpha.to_vec();
    let mut e = vec![0.0; m];
    e[1..m].copy_from_slice(&beta[..m - 1]);
    let mut z = vec![vec![0.0; m]; m];
    for (i, row) in z.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if tqli(&mut d, &mut e, Some(&mut z)).is_err() {
        let mut a = vec![vec![0.0; m]; m];
        for i in 0..m {
            a[i][i] = alpha[i];
            if i + 1 < m {
                a[i][i + 1] = beta[i];
                a[i + 1][i] = beta[i];
            }
        }
        (d, z) = jacobi_eigen(a);
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&x, &y| d[x].partial_cmp(&d[y]).unwrap());
    let sv = idx.iter().map(|&i| d[i]).collect();
    let svec = (0..m).map(|r| idx.iter().map(|&i| z[r][i]).collect()).collect();
    (sv, svec)
}

/// Cyclic Jacobi eigen-decomposition of a small dense symmetric matrix.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let tot: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * tot.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Eigenpair closest to `sigma` from above, by shift-invert Lanczos.
fn shift_invert(a: &SparseMatrix, sigma: f64, perm: &[usize], anorm: f64, tol: f64) -> Eigenpair {
    let f = EnvelopeLdl::factor(a, sigma, perm);
    let (theta, x) = lanczos(a.n, |v| f.solve(v), 300, |th, x| residual(a, sigma + 1.0 / th, x, anorm) <= tol);
    let value = sigma + 1.0 / theta;
    let r = residual(a, value, &x, anorm);
    Eigenpair { value, vector: x, residual: r }
}

/// Smallest and largest eigenvalue of a symmetric matrix with certified residuals.
/// Dense QL for `n ≤ 1000`, otherwise Lanczos with inertia-guided shift-invert; in both
/// cases the eigenvectors come from shift-invert refinement.
pub fn extreme_eigenvalues(a: &SparseMatrix) -> Result<Extremes> {
    extreme_eigenvalues_with(a, 1000)
}

/// As [`extreme_eigenvalues`] with an explicit size limit for the dense path.
pub fn extreme_eigenvalues_with(a: &SparseMatrix, dense_limit: usize) -> Result<Extremes> {
    const TOL: f64 = 1e-8;
    let n = a.n;
    if n == 0 {
        return Err(Error::Dimension { expected: 1, got: 0 });
    }
    let anorm = a.norm_inf();
    let perm = rcm(a);
    // Gershgorin bounds
    let lo_bound = (0..n)
        .map(|i| {
            let mut c = 0.0;
            let mut r = 0.0;
            for (j, v) in a.row(i) {
                if j == i {
                    c = v;
                } else {
                    r += v.abs();
                }
            }
            c - r
        })
        .fold(f64::INFINITY, f64::min);
    let gap = 1e-9 * anorm.max(1e-300);
    let (min_guess, max_guess) = if n <= dense_limit {
        let ev = dense_eigenvalues(&a.to_dense())?;
        (Some(ev[0]), Some(ev[n - 1]))
    } else {
        (None, None)
    };
    let min = match min_guess {
        Some(l) => shift_invert(a, l - gap.max(1e-6 * l.abs()), &perm, anorm, TOL),
        None if EnvelopeLdl::factor(a, 0.0, &perm).negative_count() == 0 => shift_invert(a, 0.0, &perm, anorm, TOL),
        None => {
            // bracket λ_min by inertia counts, then shift just below it
            let mut lo = lo_bound - gap;
            let mut hi = 0.0;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if EnvelopeLdl::factor(a, mid, &perm).negative_count() == 0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-3 * f64::max(hi.abs(), gap) {
                    break;
                }
            }
            shift_invert(a, lo - (hi - lo), &perm, anorm, TOL)
        }
    };
    let max = match max_guess {
        Some(l) => {
            // σ above λ_max: shift-invert of the negated matrix
            let neg = negate(a);
            let mut p = shift_invert(&neg, -l - gap.max(1e-6 * l.abs()), &perm, anorm, TOL);
            p.value = -p.value;
            p
        }
        None => {
            let (th, x) = lanczos(n, |v| a.matvec(v), 400, |th, x| residual(a, th, x, anorm) <= TOL);
            let r = residual(a, th, &x, anorm);
            Eigenpair { value: th, vector: x, residual: r }
        }
    };
    let certified = min.residual <= TOL && max.residual <= TOL;
    if !min.residual.is_finite() {
        return Err(Error::NoConvergence { estimate: min.value, residual: min.residual });
    }
    Ok(Extremes { min, max, certified })
}

fn negate(a: &SparseMatrix) -> SparseMatrix {
    let mut m = a.clone();
    for v in &mut m.val {
        *v = -*v;
    }
    m
}

#[derive(Clone, Debug)]
pub struct SpdReport {
    pub spd: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Eigenvector of `λ_min` when the check fails.
    pub witness: Option<Vec<f64>>,
}

/// Positive definiteness in the sense `λ_min > −1e-10 λ_max`.
pub fn spd_check(a: &SparseMatrix) -> Result<SpdReport> {
    let ex = extreme_eigenvalues(a)?;
    let spd = ex.min.value > -1e-10 * ex.max.value.abs();
    Ok(SpdReport {
        spd,
        lambda_min: ex.min.value,
        lambda_max: ex.max.value,
        witness: if spd { None } else { Some(ex.min.vector) },
    })
}
