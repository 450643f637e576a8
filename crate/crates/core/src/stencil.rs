//! Element matrices, the star of fine elements around a lattice node, reference
//! stencils per primitive class and the edge-type classification.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::mesh::{directions, direction_index, num_shapes, shape_path, LatticePt, Point, RefinedGrid};

pub type Mat4 = [[f64; 4]; 4];
pub type Sym3 = [[f64; 3]; 3];

pub const IDENTITY3: Sym3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Gradients of the barycentric basis functions and the measure of a simplex.
pub fn gradients(dim: usize, p: &[Point]) -> Result<([Point; 4], f64)> {
    let mut g = [[0.0; 3]; 4];
    let vol;
    if dim == 2 {
        let (x1, y1) = (p[1][0] - p[0][0], p[1][1] - p[0][1]);
        let (x2, y2) = (p[2][0] - p[0][0], p[2][1] - p[0][1]);
        let det = x1 * y2 - x2 * y1;
        if det.abs() < 1e-300 {
            return Err(Error::Degenerate(0));
        }
        g[1] = [y2 / det, -x2 / det, 0.0];
        g[2] = [-y1 / det, x1 / det, 0.0];
        vol = 0.5 * det.abs();
    } else {
        let e = [
            [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]],
            [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]],
            [p[3][0] - p[0][0], p[3][1] - p[0][1], p[3][2] - p[0][2]],
        ];
        let c = |a: &Point, b: &Point| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let n1 = c(&e[1], &e[2]);
        let n2 = c(&e[2], &e[0]);
        let n3 = c(&e[0], &e[1]);
        let det = e[0][0] * n1[0] + e[0][1] * n1[1] + e[0][2] * n1[2];
        if det.abs() < 1e-300 {
            return Err(Error::Degenerate(0));
        }
        for i in 0..3 {
            g[1][i] = n1[i] / det;
            g[2][i] = n2[i] / det;
            g[3][i] = n3[i] / det;
        }
        vol = det.abs() / 6.0;
    }
    for i in 0..3 {
        g[0][i] = -(g[1][i] + g[2][i] + g[3][i]);
    }
    Ok((g, vol))
}

/// `a_ij = |t| ∇φ_i · G ∇φ_j`; `G = I` gives the plain stiffness matrix.
pub fn element_matrix(dim: usize, p: &[Point], metric: &Sym3) -> Result<Mat4> {
    let (g, vol) = gradients(dim, p)?;
    let mut a = [[0.0; 4]; 4];
    for i in 0..=dim {
        let mut gi = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                gi[r] += metric[r][c] * g[i][c];
            }
        }
        for j in 0..=dim {
            a[i][j] = vol * (gi[0] * g[j][0] + gi[1] * g[j][1] + gi[2] * g[j][2]);
        }
    }
    // exact zero row sums through the diagonal
    for i in 0..=dim {
        let mut s = 0.0;
        for j in 0..=dim {
            if j != i {
                s += a[i][j];
            }
        }
        a[i][i] = -s;
    }
    Ok(a)
}

pub fn element_stiffness(dim: usize, p: &[Point]) -> Result<Mat4> {
    element_matrix(dim, p, &IDENTITY3)
}

/// Consistent P1 mass matrix.
pub fn element_mass(dim: usize, p: &[Point]) -> Result<Mat4> {
    let (_, vol) = gradients(dim, p)?;
    let c = vol / ((dim + 1) * (dim + 2)) as f64;
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate().take(dim + 1) {
        for (j, v) in row.iter_mut().enumerate().take(dim + 1) {
            *v = if i == j { 2.0 * c } else { c };
        }
    }
    Ok(m)
}

pub const CENTER: usize = usize::MAX;

/// One fine element of the star around a node.
#[derive(Clone, Debug)]
pub struct StarElem {
    pub shape: usize,
    /// Local vertex (in the shape's ordering) sitting at the center node.
    pub pos: usize,
    /// Lattice offsets of the local vertices relative to the center.
    pub offsets: [LatticePt; 4],
    /// Direction index of each local vertex, `CENTER` at `pos`.
    pub dirs: [usize; 4],
}

pub struct Star {
    pub dim: usize,
    pub elems: Vec<StarElem>,
    /// Per class mask, which star elements lie inside the macro element.
    pub inside: [Vec<bool>; 16],
    /// Per direction, the star elements containing it with the local vertex index.
    pub by_dir: Vec<Vec<(usize, usize)>>,
}

fn build_star(dim: usize) -> Star {
    let mut elems = Vec::new();
    for s in 0..num_shapes(dim) {
        let path = shape_path(dim, s);
        for pos in 0..=dim {
            let mut offsets = [[0; 3]; 4];
            let mut dirs = [CENTER; 4];
            for k in 0..=dim {
                for i in 0..3 {
                    offsets[k][i] = path[k][i] - path[pos][i];
                }
                if k != pos {
                    dirs[k] = direction_index(dim, offsets[k]).expect("star offsets are stencil directions");
                }
            }
            elems.push(StarElem { shape: s, pos, offsets, dirs });
        }
    }
    let nd = directions(dim).len();
    let mut by_dir = vec![Vec::new(); nd];
    for (e, el) in elems.iter().enumerate() {
        for k in 0..=dim {
            if k != el.pos {
                by_dir[el.dirs[k]].push((e, k));
            }
        }
    }
    let inside = std::array::from_fn(|mask: usize| {
        let nv = dim + 1;
        if mask == 0 || mask >= 1 << nv {
            return vec![false; elems.len()];
        }
        // a representative point of the class; weights change by at most one per step
        let cnt = mask.count_ones() as i32;
        let mut lam = [0i32; 4];
        for (i, l) in lam.iter_mut().enumerate().take(nv) {
            if mask >> i & 1 == 1 {
                *l = 12 / cnt;
            }
        }
        let n: i32 = lam.iter().sum();
        elems
            .iter()
            .map(|el| {
                (0..=dim).all(|k| {
                    let p = [lam[1] + el.offsets[k][0], lam[2] + el.offsets[k][1], lam[3] + el.offsets[k][2]];
                    p.iter().all(|&x| x >= 0) && p[0] + p[1] + p[2] <= n
                })
            })
            .collect()
    });
    Star { dim, elems, inside, by_dir }
}

pub fn star(dim: usize) -> &'static Star {
    static S2: OnceLock<Star> = OnceLock::new();
    static S3: OnceLock<Star> = OnceLock::new();
    if dim == 3 {
        S3.get_or_init(|| build_star(3))
    } else {
        S2.get_or_init(|| build_star(2))
    }
}

/// Summation plan for the per-element coefficient sums `Σ_k κ(x_k^t)` of the star.
/// Every element sum is `((κ_c + κ_x) [+ κ_y]) + κ_z`, with the leading pair and (in 3D)
/// triple sums shared between elements.
#[derive(Clone, Debug)]
pub struct CsePlan {
    /// Pair sums `κ_c + κ_dir`.
    pub pairs: Vec<usize>,
    /// Triple sums `pairs[p] + κ_dir` (3D only).
    pub triples: Vec<(usize, usize)>,
    /// Per star element: the partial sum it starts from (a pair index in 2D, a triple
    /// index in 3D) and the last direction added.
    pub elems: Vec<(usize, usize)>,
}

impl CsePlan {
    pub fn additions(&self) -> usize {
        self.pairs.len() + self.triples.len() + self.elems.len()
    }

    /// Vertex directions of element `e` in plan summation order.
    pub fn order(&self, e: usize) -> Vec<usize> {
        let (src, last) = self.elems[e];
        if self.triples.is_empty() {
            vec![self.pairs[src], last]
        } else {
            let (p, y) = self.triples[src];
            vec![self.pairs[p], y, last]
        }
    }
}

fn build_plan(dim: usize) -> CsePlan {
    let st = star(dim);
    let nd = directions(dim).len();
    let ne = st.elems.len();
    let around = |d: usize| -> Vec<usize> { st.by_dir[d].iter().map(|&(e, _)| e).collect() };
    let per = ne / if dim == 3 { 4 } else { 3 };
    // choose directions whose element sets partition the star
    let cands: Vec<usize> = (0..nd).filter(|&d| around(d).len() == per).collect();
    let k = if dim == 3 { 4 } else { 3 };
    let mut chosen = None;
    let mut idx: Vec<usize> = (0..k).collect();
    'outer: loop {
        let mut cover = vec![0; ne];
        for &i in &idx {
            for e in around(cands[i]) {
                cover[e] += 1;
            }
        }
        if cover.iter().all(|&c| c == 1) {
            chosen = Some(idx.iter().map(|&i| cands[i]).collect::<Vec<_>>());
            break;
        }
        // next combination
        let mut i = k;
        while i > 0 {
            i -= 1;
            if idx[i] < cands.len() - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                continue 'outer;
            }
        }
        break;
    }
    let pairs = chosen.expect("a partition of the star exists");
    let mut elems = vec![(usize::MAX, usize::MAX); ne];
    let mut triples = Vec::new();
    let others = |e: usize, skip: &[usize]| -> Vec<usize> {
        let el = &st.elems[e];
        (0..=dim).filter(|&k| k != el.pos).map(|k| el.dirs[k]).filter(|d| !skip.contains(d)).collect()
    };
    for (p, &d) in pairs.iter().enumerate() {
        let mut list = around(d);
        if dim == 2 {
            for e in list {
                elems[e] = (p, others(e, &[d])[0]);
            }
            continue;
        }
        // pair up elements sharing a third vertex
        while let Some(e) = list.first().copied() {
            let rest = others(e, &[d]);
            let mut matched = None;
            'find: for &y in &rest {
                for &f in list.iter().skip(1) {
                    if others(f, &[d]).contains(&y) {
                        matched = Some((y, f));
                        break 'find;
                    }
                }
            }
            let (y, f) = matched.expect("star elements around an edge pair up");
            triples.push((p, y));
            let t = triples.len() - 1;
            elems[e] = (t, others(e, &[d, y])[0]);
            elems[f] = (t, others(f, &[d, y])[0]);
            list.retain(|&x| x != e && x != f);
        }
    }
    CsePlan { pairs, triples, elems }
}

pub fn cse_plan(dim: usize) -> &'static CsePlan {
    static P2: OnceLock<CsePlan> = OnceLock::new();
    static P3: OnceLock<CsePlan> = OnceLock::new();
    if dim == 3 {
        P3.get_or_init(|| build_plan(3))
    } else {
        P2.get_or_init(|| build_plan(2))
    }
}

/// Reference stencil data of one macro element for one metric.
#[derive(Clone, Debug)]
pub struct StencilTable {
    pub dim: usize,
    /// Element matrix per fine element shape.
    pub shape_mats: Vec<Mat4>,
    /// Per class mask: off-center entries per direction (0 where absent) and the center.
    pub classes: [[f64; 15]; 16],
}

impl StencilTable {
    pub fn new(grid: &RefinedGrid, t: usize, metric: &Sym3) -> Result<Self> {
        let dim = grid.dim();
        let pts = grid.mesh().element_points(t);
        let inv = 1.0 / grid.n() as f64;
        let mut shape_mats = Vec::new();
        for s in 0..num_shapes(dim) {
            let path = shape_path(dim, s);
            let mut q = [[0.0; 3]; 4];
            for k in 0..=dim {
                for i in 0..3 {
                    let mut x = 0.0;
                    for l in 0..dim {
                        x += path[k][l] as f64 * inv * (pts[l + 1][i] - pts[0][i]);
                    }
                    q[k][i] = x;
                }
            }
            shape_mats.push(element_matrix(dim, &q[..=dim], metric)?);
        }
        let st = star(dim);
        let mut classes = [[0.0; 15]; 16];
        for (mask, cls) in classes.iter_mut().enumerate() {
            for (e, el) in st.elems.iter().enumerate() {
                if !st.inside[mask][e] {
                    continue;
                }
                let a = &shape_mats[el.shape];
                for k in 0..=dim {
                    if k == el.pos {
                        cls[14] += a[el.pos][k];
                    } else {
                        cls[el.dirs[k]] += a[el.pos][k];
                    }
                }
            }
        }
        Ok(StencilTable { dim, shape_mats, classes })
    }

    pub fn interior_mask(&self) -> usize {
        (1 << (self.dim + 1)) - 1
    }

    /// Off-center entries of the interior stencil.
    pub fn interior(&self) -> &[f64] {
        &self.classes[self.interior_mask()][..directions(self.dim).len()]
    }

    pub fn center(&self) -> f64 {
        self.classes[self.interior_mask()][14]
    }
}

/// Reference (Laplacian) stencil of macro element `t`.
pub fn reference_stencil(grid: &RefinedGrid, t: usize) -> Result<StencilTable> {
    StencilTable::new(grid, t, &IDENTITY3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeColor {
    Gray,
    Blue,
    Green,
    Red,
    /// 2D interior edge.
    Plain,
}

#[derive(Clone, Debug)]
pub struct EdgeType {
    pub direction: usize,
    pub color: EdgeColor,
    /// Sign of the reference stencil entry (-1, 0, 1).
    pub sign: i8,
    /// Number of fine elements sharing an interior edge in this direction.
    pub elements: usize,
}

fn sign_of(x: f64, scale: f64) -> i8 {
    if x > 1e-12 * scale {
        1
    } else if x < -1e-12 * scale {
        -1
    } else {
        0
    }
}

/// Edge-type table of the interior stencil of a macro element. In 3D the gray type is
/// the direction `A − B + C` (through the midpoints of the macro edges v0v2 and v1v3),
/// the two other four-element directions are blue and green (blue being the positive
/// one if exactly one is positive, else the lower direction index) and the rest are red.
/// In 2D every direction is plain; positive entries flag the obtuse angle.
pub fn classify_edge_types(table: &StencilTable) -> Vec<EdgeType> {
    let dim = table.dim;
    let st = star(dim);
    let s = table.interior();
    let scale = table.center().abs();
    let mut out: Vec<EdgeType> = (0..s.len())
        .map(|j| EdgeType {
            direction: j,
            color: if dim == 2 { EdgeColor::Plain } else { EdgeColor::Red },
            sign: sign_of(s[j], scale),
            elements: st.by_dir[j].len(),
        })
        .collect();
    if dim == 3 {
        let gray = direction_index(3, [1, -1, 1]).unwrap();
        let b = direction_index(3, [0, 1, 0]).unwrap();
        let ac = direction_index(3, [1, 0, -1]).unwrap();
        let (blue, green) = match (out[b].sign > 0, out[ac].sign > 0) {
            (false, true) => (ac, b),
            _ => (b, ac),
        };
        for (d, c) in [(gray, EdgeColor::Gray), (blue, EdgeColor::Blue), (green, EdgeColor::Green)] {
            out[d].color = c;
            out[d ^ 1].color = c;
        }
    }
    out
}

/// True iff an interior angle (2D) or a dihedral angle (3D) exceeds π/2. An angle
/// opposite to the edge (i, j) is obtuse exactly when the stiffness entry a_ij > 0.
pub fn detect_obtuse(dim: usize, p: &[Point]) -> Result<bool> {
    let a = element_stiffness(dim, p)?;
    let scale = (0..=dim).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    for i in 0..=dim {
        for j in i + 1..=dim {
            if a[i][j] > 1e-12 * scale {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Smallest non-trivial eigenvalue of `Â_T x = λ B x`, `B = 3I − 11ᵀ`, for a triangle.
/// Both matrices vanish on constants; on the complement `B` acts as `3I`.
pub fn lambda_min(p: &[Point]) -> Result<f64> {
    let a = element_stiffness(2, p)?;
    let s2 = std::f64::consts::SQRT_2;
    let s6 = 6f64.sqrt();
    let q = [[1.0 / s2, -1.0 / s2, 0.0], [1.0 / s6, 1.0 / s6, -2.0 / s6]];
    let mut m = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    m[r][c] += q[r][i] * a[i][j] * q[c][j];
                }
            }
        }
    }
    let tr = m[0][0] + m[1][1];
    let disc = ((m[0][0] - m[1][1]).powi(2) + 4.0 * m[0][1] * m[1][0]).sqrt();
    Ok((tr - disc) / 6.0)
}

/// Local vertex at the largest interior angle of a triangle.
pub fn largest_angle_vertex(p: &[Point]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..3 {
        let u = [p[(i + 1) % 3][0] - p[i][0], p[(i + 1) % 3][1] - p[i][1]];
        let v = [p[(i + 2) % 3][0] - p[i][0], p[(i + 2) % 3][1] - p[i][1]];
        let c = (u[0] * v[0] + u[1] * v[1]) / ((u[0] * u[0] + u[1] * u[1]).sqrt() * (v[0] * v[0] + v[1] * v[1]).sqrt());
        let ang = c.clamp(-1.0, 1.0).acos();
        if ang > best.1 {
            best = (i, ang);
        }
    }
    best.0
}

/// The 2D lattice direction parallel to the macro edge opposite local vertex `v`.
pub fn direction_opposite(v: usize) -> usize {
    let d = match v {
        0 => [1, -1, 0],
        1 => [0, 1, 0],
        _ => [1, 0, 0],
    };
    direction_index(2, d).unwrap()
}
