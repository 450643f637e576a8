//! Macro meshes, uniform structured refinement and the per-macro storage layout.
//!
//! Every macro element `T` with vertices `v0..vd` carries a barycentric lattice of
//! `n = 2^level` intervals per edge. A lattice point `(a, b, c)` with `a + b + c <= n`
//! sits at `((n-a-b-c) v0 + a v1 + b v2 + c v3) / n`; in 2D `c` is always zero.
//! Points are stored lexicographically with `c` slowest and `a` fastest. Nodes on the
//! macro boundary are stored once per adjacent macro element ("slots") and share one
//! global id.
//!
//! In the cumulative coordinates `p = a+b+c, q = b+c, r = c` the Bey refinement of the
//! macro element is the Kuhn triangulation of the region `n >= p >= q >= r >= 0`, which
//! is how fine elements are enumerated here.

use std::sync::Arc;

use crate::error::{Error, Result};

pub type Point = [f64; 3];
/// Lattice coordinates `(a, b, c)`.
pub type LatticePt = [i32; 3];

/// Unit steps of the cumulative coordinates `p, q, r` expressed in `(a, b, c)`.
const CUMULATIVE_STEPS: [LatticePt; 3] = [[1, 0, 0], [-1, 1, 0], [0, -1, 1]];

/// Permutations of the cumulative axes; index = fine element shape in 3D.
pub const PERMS3: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];
const PERMS2: [[usize; 2]; 2] = [[0, 1], [1, 0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Vertex,
    Edge,
    Face,
    Volume,
}

/// Which macro primitive a node belongs to, with the index of that primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrimitiveClass {
    pub kind: PrimitiveKind,
    pub entity: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Diagonal {
    /// Squares split along (0,0)-(1,1).
    Forward,
    /// Squares split along (1,0)-(0,1).
    Backward,
}

#[derive(Clone, Debug)]
pub struct MacroMesh {
    dim: usize,
    vertices: Vec<Point>,
    elements: Vec<[usize; 4]>,
    edges: Vec<[usize; 2]>,
    faces: Vec<[usize; 3]>,
    /// Per element, the global entity reached by each subset of local vertices
    /// (bitmask index). Singletons give vertex ids, pairs edge ids, triples face ids
    /// (cell id in 2D), the full set the element itself.
    entity_of: Vec<[usize; 16]>,
    boundary_vertex: Vec<bool>,
    boundary_edge: Vec<bool>,
    boundary_face: Vec<bool>,
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point, b: &Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Signed measure (area or volume) of a simplex.
pub fn simplex_measure(dim: usize, p: &[Point]) -> f64 {
    if dim == 2 {
        let u = sub(&p[1], &p[0]);
        let v = sub(&p[2], &p[0]);
        0.5 * (u[0] * v[1] - u[1] * v[0])
    } else {
        let u = sub(&p[1], &p[0]);
        let v = sub(&p[2], &p[0]);
        let w = sub(&p[3], &p[0]);
        dot(&u, &cross(&v, &w)) / 6.0
    }
}

impl MacroMesh {
    pub fn new(dim: usize, vertices: Vec<Point>, elements: Vec<Vec<usize>>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Dimension { expected: 3, got: dim });
        }
        let nv = dim + 1;
        let mut elems = Vec::with_capacity(elements.len());
        let mut scale: f64 = 0.0;
        for v in &vertices {
            for x in v {
                scale = scale.max(x.abs());
            }
        }
        let scale = scale.max(1e-300);
        for (e, el) in elements.iter().enumerate() {
            if el.len() != nv {
                return Err(Error::Dimension { expected: nv, got: el.len() });
            }
            let mut arr = [usize::MAX; 4];
            for (i, &g) in el.iter().enumerate() {
                if g >= vertices.len() {
                    return Err(Error::NonConforming(format!(
                        "element {e} references vertex {g} out of range"
                    )));
                }
                if el[..i].contains(&g) {
                    return Err(Error::Degenerate(e));
                }
                arr[i] = g;
            }
            let pts: Vec<Point> = el.iter().map(|&g| vertices[g]).collect();
            if simplex_measure(dim, &pts).abs() <= 1e-13 * scale.powi(dim as i32) {
                return Err(Error::Degenerate(e));
            }
            elems.push(arr);
        }

        let mut edge_map = std::collections::HashMap::new();
        let mut face_map = std::collections::HashMap::new();
        let mut edges = Vec::new();
        let mut faces = Vec::new();
        let mut edge_count: Vec<usize> = Vec::new();
        let mut face_count: Vec<usize> = Vec::new();
        let mut entity_of = Vec::with_capacity(elems.len());
        for (e, el) in elems.iter().enumerate() {
            let mut ent = [usize::MAX; 16];
            for mask in 1usize..(1 << nv) {
                let mut gs: Vec<usize> = (0..nv).filter(|i| mask >> i & 1 == 1).map(|i| el[i]).collect();
                gs.sort_unstable();
                ent[mask] = match gs.len() {
                    1 => gs[0],
                    2 => *edge_map.entry((gs[0], gs[1])).or_insert_with(|| {
                        edges.push([gs[0], gs[1]]);
                        edge_count.push(0);
                        edges.len() - 1
                    }),
                    3 if dim == 3 => *face_map.entry((gs[0], gs[1], gs[2])).or_insert_with(|| {
                        faces.push([gs[0], gs[1], gs[2]]);
                        face_count.push(0);
                        faces.len() - 1
                    }),
                    _ => e,
                };
                if gs.len() == 2 {
                    edge_count[ent[mask]] += 1;
                }
                if gs.len() == 3 && dim == 3 {
                    face_count[ent[mask]] += 1;
                }
            }
            entity_of.push(ent);
        }

        let mut boundary_vertex = vec![false; vertices.len()];
        let mut boundary_edge = vec![false; edges.len()];
        let mut boundary_face = vec![false; faces.len()];
        if dim == 2 {
            for (i, &c) in edge_count.iter().enumerate() {
                if c > 2 {
                    return Err(Error::NonConforming(format!("edge {:?} shared by {c} elements", edges[i])));
                }
                if c == 1 {
                    boundary_edge[i] = true;
                    boundary_vertex[edges[i][0]] = true;
                    boundary_vertex[edges[i][1]] = true;
                }
            }
        } else {
            for (i, &c) in face_count.iter().enumerate() {
                if c > 2 {
                    return Err(Error::NonConforming(format!("face {:?} shared by {c} elements", faces[i])));
                }
                if c == 1 {
                    boundary_face[i] = true;
                    let f = faces[i];
                    for &g in &f {
                        boundary_vertex[g] = true;
                    }
                    for (a, b) in [(f[0], f[1]), (f[0], f[2]), (f[1], f[2])] {
                        boundary_edge[edge_map[&(a, b)]] = true;
                    }
                }
            }
        }

        let used: Vec<bool> = {
            let mut u = vec![false; vertices.len()];
            for el in &elems {
                for &g in &el[..nv] {
                    u[g] = true;
                }
            }
            u
        };
        for (g, v) in vertices.iter().enumerate() {
            if !used[g] {
                return Err(Error::NonConforming(format!("vertex {g} is not used by any element")));
            }
            for ed in &edges {
                if ed.contains(&g) {
                    continue;
                }
                let a = vertices[ed[0]];
                let b = vertices[ed[1]];
                let ab = sub(&b, &a);
                let av = sub(v, &a);
                let len2 = dot(&ab, &ab);
                let t = dot(&av, &ab) / len2;
                if t > 1e-12 && t < 1.0 - 1e-12 {
                    let c = cross(&ab, &av);
                    if dot(&c, &c) <= 1e-24 * len2 * len2 {
                        return Err(Error::NonConforming(format!(
                            "vertex {g} hangs on edge {:?}",
                            ed
                        )));
                    }
                }
            }
        }

        Ok(MacroMesh {
            dim,
            vertices,
            elements: elems,
            edges,
            faces,
            entity_of,
            boundary_vertex,
            boundary_edge,
            boundary_face,
        })
    }

    /// Parses the ASCII format `DIM d`, `VERTICES n` + coordinates, `ELEMENTS m` +
    /// 0-based vertex indices. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let mut header = |key: &str, last: usize| -> Result<(usize, usize)> {
            let (ln, l) = lines.next().ok_or_else(|| perr(last + 1, &format!("expected `{key}`")))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(key) {
                return Err(perr(ln, &format!("expected `{key} <count>`")));
            }
            let v = it
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| perr(ln, &format!("`{key}` needs a non-negative integer")))?;
            Ok((ln, v))
        };
        let (ln, dim) = header("DIM", 0)?;
        if dim != 2 && dim != 3 {
            return Err(perr(ln, "DIM must be 2 or 3"));
        }
        let (ln, nvert) = header("VERTICES", ln)?;
        drop(header);
        let mut last = ln;
        let mut vertices = Vec::with_capacity(nvert);
        for _ in 0..nvert {
            let (ln, l) = lines.next().ok_or_else(|| perr(last + 1, "missing vertex line"))?;
            last = ln;
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| perr(ln, &format!("bad coordinate `{s}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != dim {
                return Err(perr(ln, &format!("expected {dim} coordinates, found {}", vals.len())));
            }
            let mut p = [0.0; 3];
            p[..dim].copy_from_slice(&vals);
            vertices.push(p);
        }
        let (ln, l) = lines.next().ok_or_else(|| perr(last + 1, "expected `ELEMENTS`"))?;
        let mut it = l.split_whitespace();
        if it.next() != Some("ELEMENTS") {
            return Err(perr(ln, "expected `ELEMENTS <count>`"));
        }
        let nel = it
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| perr(ln, "`ELEMENTS` needs a non-negative integer"))?;
        last = ln;
        let mut elements = Vec::with_capacity(nel);
        for _ in 0..nel {
            let (ln, l) = lines.next().ok_or_else(|| perr(last + 1, "missing element line"))?;
            last = ln;
            let idx: Vec<usize> = l
                .split_whitespace()
                .map(|s| s.parse::<usize>().map_err(|_| perr(ln, &format!("bad index `{s}`"))))
                .collect::<Result<_>>()?;
            if idx.len() != dim + 1 {
                return Err(perr(ln, &format!("expected {} indices, found {}", dim + 1, idx.len())));
            }
            if let Some(&g) = idx.iter().find(|&&g| g >= nvert) {
                return Err(perr(ln, &format!("vertex index {g} out of range")));
            }
            elements.push(idx);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(perr(ln, "trailing content"));
        }
        MacroMesh::new(dim, vertices, elements)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("DIM {}\nVERTICES {}\n", self.dim, self.vertices.len());
        for v in &self.vertices {
            let c: Vec<String> = v[..self.dim].iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&c.join(" "));
            s.push('\n');
        }
        s.push_str(&format!("ELEMENTS {}\n", self.elements.len()));
        for e in &self.elements {
            let c: Vec<String> = e[..=self.dim].iter().map(|x| x.to_string()).collect();
            s.push_str(&c.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn unit_square() -> Self {
        Self::square_grid(1, 1, Diagonal::Forward)
    }

    /// `nx × ny` squares over the unit square, each split into two triangles.
    pub fn square_grid(nx: usize, ny: usize, diagonal: Diagonal) -> Self {
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut v = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                v.push([i as f64 / nx as f64, j as f64 / ny as f64, 0.0]);
            }
        }
        let mut e = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                match diagonal {
                    Diagonal::Forward => {
                        e.push(vec![a, b, c]);
                        e.push(vec![a, c, d]);
                    }
                    Diagonal::Backward => {
                        e.push(vec![a, b, d]);
                        e.push(vec![b, c, d]);
                    }
                }
            }
        }
        MacroMesh::new(2, v, e).expect("square grid is valid")
    }

    /// Unit cube split into six tetrahedra around the diagonal (0,0,0)-(1,1,1).
    pub fn unit_cube_6() -> Self {
        Self::box_kuhn([0.0; 3], [1.0; 3], [1, 1, 1])
    }

    /// A box subdivided into `blocks` hexahedra, each split into six Kuhn tetrahedra.
    pub fn box_kuhn(lo: Point, hi: Point, blocks: [usize; 3]) -> Self {
        let [nx, ny, nz] = blocks;
        let id = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
        let mut v = Vec::new();
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    let t = [i as f64 / nx as f64, j as f64 / ny as f64, k as f64 / nz as f64];
                    v.push([
                        lo[0] + (hi[0] - lo[0]) * t[0],
                        lo[1] + (hi[1] - lo[1]) * t[1],
                        lo[2] + (hi[2] - lo[2]) * t[2],
                    ]);
                }
            }
        }
        let mut e = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    for perm in PERMS3 {
                        let mut c = [i, j, k];
                        let mut tet = vec![id(c[0], c[1], c[2])];
                        for &ax in &perm {
                            c[ax] += 1;
                            tet.push(id(c[0], c[1], c[2]));
                        }
                        e.push(tet);
                    }
                }
            }
        }
        MacroMesh::new(3, v, e).expect("Kuhn box is valid")
    }

    /// Unit cube split into twelve tetrahedra joining the center to two triangles per face.
    pub fn unit_cube_12() -> Self {
        let mut v: Vec<Point> = Vec::new();
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    v.push([i as f64, j as f64, k as f64]);
                }
            }
        }
        v.push([0.5, 0.5, 0.5]);
        let id = |i: usize, j: usize, k: usize| k * 4 + j * 2 + i;
        let mut e = Vec::new();
        for axis in 0..3 {
            for side in 0..2 {
                let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
                let corner = |s: usize, t: usize| {
                    let mut c = [0; 3];
                    c[axis] = side;
                    c[u] = s;
                    c[w] = t;
                    id(c[0], c[1], c[2])
                };
                e.push(vec![corner(0, 0), corner(1, 0), corner(1, 1), 8]);
                e.push(vec![corner(0, 0), corner(1, 1), corner(0, 1), 8]);
            }
        }
        MacroMesh::new(3, v, e).expect("12-tet cube is valid")
    }

    pub fn reference_tetrahedron() -> Self {
        MacroMesh::new(
            3,
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![vec![0, 1, 2, 3]],
        )
        .expect("valid")
    }

    /// The regular tetrahedron with vertices (±1, 0, −1/√2), (0, ±1, 1/√2).
    pub fn regular_tetrahedron() -> Self {
        let s = 1.0 / 2f64.sqrt();
        MacroMesh::new(
            3,
            vec![[1.0, 0.0, -s], [-1.0, 0.0, -s], [0.0, 1.0, s], [0.0, -1.0, s]],
            vec![vec![0, 1, 2, 3]],
        )
        .expect("valid")
    }

    /// Unit square with a non-Delaunay pair of obtuse macro triangles in the middle,
    /// the remaining twelve triangles being non-obtuse.
    pub fn obtuse_square() -> Self {
        Self::parse(OBTUSE_SQUARE).expect("built-in mesh is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }
    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }
    /// Global vertex ids of element `t` (length d+1).
    pub fn element(&self, t: usize) -> &[usize] {
        &self.elements[t][..=self.dim]
    }
    pub fn element_points(&self, t: usize) -> Vec<Point> {
        self.element(t).iter().map(|&g| self.vertices[g]).collect()
    }
    /// Entity reached from element `t` by the local vertex subset `mask`.
    pub fn entity(&self, t: usize, mask: usize) -> usize {
        self.entity_of[t][mask]
    }
    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }
    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.boundary_edge[e]
    }
    pub fn is_boundary_face(&self, f: usize) -> bool {
        self.boundary_face[f]
    }
    pub fn num_boundary_edges(&self) -> usize {
        self.boundary_edge.iter().filter(|&&b| b).count()
    }
    pub fn num_boundary_faces(&self) -> usize {
        self.boundary_face.iter().filter(|&&b| b).count()
    }

    /// Kind of primitive spanned by `count` local vertices.
    pub fn kind_of(&self, count: usize) -> PrimitiveKind {
        match count {
            1 => PrimitiveKind::Vertex,
            2 => PrimitiveKind::Edge,
            3 if self.dim == 3 => PrimitiveKind::Face,
            _ => PrimitiveKind::Volume,
        }
    }

    fn entity_on_boundary(&self, kind: PrimitiveKind, id: usize) -> bool {
        match kind {
            PrimitiveKind::Vertex => self.boundary_vertex[id],
            PrimitiveKind::Edge => self.boundary_edge[id],
            PrimitiveKind::Face => self.boundary_face[id],
            PrimitiveKind::Volume => false,
        }
    }
}

/// Coordinates of the built-in obtuse mesh (see `MacroMesh::obtuse_square`).
pub const OBTUSE_SQUARE: &str = include_str!("../data/obtuse_square.mesh");

/// The barycentric lattice of one macro element.
#[derive(Clone, Debug)]
pub struct Lattice {
    dim: usize,
    n: usize,
    layer_start: Vec<usize>,
    size: usize,
}

fn tri_count(m: i64) -> usize {
    if m < 0 {
        0
    } else {
        ((m + 1) * (m + 2) / 2) as usize
    }
}

fn tet_count(m: i64) -> usize {
    if m < 0 {
        0
    } else {
        ((m + 1) * (m + 2) * (m + 3) / 6) as usize
    }
}

impl Lattice {
    pub fn new(dim: usize, n: usize) -> Self {
        let layers = if dim == 3 { n + 1 } else { 1 };
        let mut layer_start = Vec::with_capacity(layers + 1);
        let mut s = 0;
        for c in 0..layers {
            layer_start.push(s);
            s += tri_count((n - c) as i64);
        }
        layer_start.push(s);
        Lattice { dim, n, layer_start, size: s }
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn size(&self) -> usize {
        self.size
    }
    /// Index of the first point of row `(b, c)`.
    #[inline]
    pub fn row_start(&self, b: usize, c: usize) -> usize {
        let m = self.n - c;
        self.layer_start[c] + b * (2 * m + 3 - b) / 2
    }
    #[inline]
    pub fn index(&self, a: usize, b: usize, c: usize) -> usize {
        self.row_start(b, c) + a
    }
    #[inline]
    pub fn contains(&self, p: LatticePt) -> bool {
        p[0] >= 0 && p[1] >= 0 && p[2] >= 0 && (p[0] + p[1] + p[2]) as usize <= self.n && (self.dim == 3 || p[2] == 0)
    }
    #[inline]
    pub fn index_of(&self, p: LatticePt) -> usize {
        self.index(p[0] as usize, p[1] as usize, p[2] as usize)
    }
    /// Barycentric weights `(n-a-b-c, a, b, c)`.
    #[inline]
    pub fn barycentric(&self, p: LatticePt) -> [i32; 4] {
        [self.n as i32 - p[0] - p[1] - p[2], p[0], p[1], p[2]]
    }
    /// Bitmask of local vertices with positive barycentric weight.
    #[inline]
    pub fn class_mask(&self, p: LatticePt) -> usize {
        let l = self.barycentric(p);
        let mut m = 0;
        for (i, &li) in l.iter().enumerate().take(self.dim + 1) {
            if li > 0 {
                m |= 1 << i;
            }
        }
        m
    }
    /// All lattice points in storage order.
    pub fn points(&self) -> impl Iterator<Item = LatticePt> + '_ {
        let n = self.n as i32;
        let cmax = if self.dim == 3 { n } else { 0 };
        (0..=cmax).flat_map(move |c| (0..=n - c).flat_map(move |b| (0..=n - c - b).map(move |a| [a, b, c])))
    }
    /// Fine elements as lattice vertex tuples together with their shape index.
    /// Shapes index `PERMS3` in 3D (0..6) and are 0 ("up") / 1 ("down") in 2D.
    pub fn elements(&self) -> Vec<([LatticePt; 4], usize)> {
        let mut out = Vec::new();
        for base in self.points() {
            for s in 0..num_shapes(self.dim) {
                let path = shape_path(self.dim, s);
                let mut v = [[0; 3]; 4];
                let mut ok = true;
                for k in 0..=self.dim {
                    v[k] = [base[0] + path[k][0], base[1] + path[k][1], base[2] + path[k][2]];
                    ok &= self.contains(v[k]);
                }
                if ok {
                    out.push((v, s));
                }
            }
        }
        out
    }
}

pub fn num_shapes(dim: usize) -> usize {
    if dim == 3 {
        6
    } else {
        2
    }
}

/// Vertex offsets (relative to the base point) of fine element shape `s`.
pub fn shape_path(dim: usize, s: usize) -> [LatticePt; 4] {
    let mut out = [[0; 3]; 4];
    let mut cur = [0; 3];
    let perm: &[usize] = if dim == 3 { &PERMS3[s] } else { &PERMS2[s] };
    for (k, &ax) in perm.iter().enumerate() {
        for i in 0..3 {
            cur[i] += CUMULATIVE_STEPS[ax][i];
        }
        out[k + 1] = cur;
    }
    out
}

const FLAG_OWNER: u8 = 0x10;
const FLAG_DIRICHLET: u8 = 0x20;
const MASK_CLASS: u8 = 0x0f;

/// A macro mesh refined `level` times with the slot layout described in the module docs.
#[derive(Debug)]
pub struct RefinedGrid {
    mesh: Arc<MacroMesh>,
    level: usize,
    lattice: Lattice,
    slot_global: Vec<u32>,
    slot_info: Vec<u8>,
    /// Shared (non-volume) nodes: CSR groups of slots, ordered by global id.
    shared_ptr: Vec<usize>,
    shared_slots: Vec<u32>,
    shared_global: Vec<u32>,
    /// Multiplicity of each slot's node (number of slots sharing it).
    slot_mult: Vec<u8>,
    num_global: usize,
    global_dirichlet: Vec<bool>,
    offsets: [usize; 4],
}

impl RefinedGrid {
    pub fn new(mesh: Arc<MacroMesh>, level: usize) -> Self {
        let dim = mesh.dim();
        let n = 1usize << level;
        let lattice = Lattice::new(dim, n);
        let ni = n as i64;
        let per_edge = (n - 1) as usize;
        let per_face = tri_count(ni - 3);
        let per_cell = if dim == 3 { tet_count(ni - 4) } else { tri_count(ni - 3) };
        let nf = if dim == 3 { mesh.num_faces() } else { 0 };
        let o_edge = mesh.num_vertices();
        let o_face = o_edge + mesh.num_edges() * per_edge;
        let o_cell = o_face + nf * per_face;
        let num_global = o_cell + mesh.num_elements() * per_cell;
        assert!(num_global < u32::MAX as usize, "grid too large for 32-bit node ids");
        let total = lattice.size() * mesh.num_elements();
        let mut slot_global = vec![0u32; total];
        let mut slot_info = vec![0u8; total];
        let mut shared: Vec<(u32, u32)> = Vec::new();
        let mut global_dirichlet = vec![false; num_global];

        for t in 0..mesh.num_elements() {
            let el = mesh.element(t).to_vec();
            let base = t * lattice.size();
            for (k, p) in lattice.points().enumerate() {
                let lam = lattice.barycentric(p);
                let mask = lattice.class_mask(p);
                let count = mask.count_ones() as usize;
                let kind = mesh.kind_of(count);
                let ent = mesh.entity(t, mask);
                let gid = match kind {
                    PrimitiveKind::Vertex => ent,
                    PrimitiveKind::Volume => {
                        let local = if dim == 3 {
                            tet_index(p[0] - 1, p[1] - 1, p[2] - 1, ni - 4)
                        } else {
                            tri_index(p[0] - 1, p[1] - 1, ni - 3)
                        };
                        o_cell + t * per_cell + local
                    }
                    _ => {
                        let mut lg: Vec<(usize, i32)> = (0..=dim).filter(|&i| lam[i] > 0).map(|i| (el[i], lam[i])).collect();
                        lg.sort_unstable();
                        if kind == PrimitiveKind::Edge {
                            o_edge + ent * per_edge + (lg[1].1 - 1) as usize
                        } else {
                            o_face + ent * per_face + tri_index(lg[1].1 - 1, lg[2].1 - 1, ni - 3)
                        }
                    }
                };
                let slot = base + k;
                slot_global[slot] = gid as u32;
                let mut info = mask as u8;
                if mesh.entity_on_boundary(kind, ent) {
                    info |= FLAG_DIRICHLET;
                    global_dirichlet[gid] = true;
                }
                if kind == PrimitiveKind::Volume {
                    info |= FLAG_OWNER;
                } else {
                    shared.push((gid as u32, slot as u32));
                }
                slot_info[slot] = info;
            }
        }
        shared.sort_unstable();
        let mut shared_ptr = vec![0];
        let mut shared_slots = Vec::with_capacity(shared.len());
        let mut shared_global = Vec::new();
        let mut slot_mult = vec![1u8; total];
        let mut i = 0;
        while i < shared.len() {
            let g = shared[i].0;
            let start = i;
            while i < shared.len() && shared[i].0 == g {
                shared_slots.push(shared[i].1);
                i += 1;
            }
            slot_info[shared[start].1 as usize] |= FLAG_OWNER;
            let m = (i - start) as u8;
            for s in &shared[start..i] {
                slot_mult[s.1 as usize] = m;
            }
            shared_global.push(g);
            shared_ptr.push(shared_slots.len());
        }
        RefinedGrid {
            mesh,
            level,
            lattice,
            slot_global,
            slot_info,
            shared_ptr,
            shared_slots,
            shared_global,
            slot_mult,
            num_global,
            global_dirichlet,
            offsets: [0, o_edge, o_face, o_cell],
        }
    }

    pub fn mesh(&self) -> &MacroMesh {
        &self.mesh
    }
    pub fn mesh_arc(&self) -> &Arc<MacroMesh> {
        &self.mesh
    }
    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }
    pub fn level(&self) -> usize {
        self.level
    }
    pub fn n(&self) -> usize {
        self.lattice.n()
    }
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }
    pub fn num_macros(&self) -> usize {
        self.mesh.num_elements()
    }
    pub fn slots_per_macro(&self) -> usize {
        self.lattice.size()
    }
    pub fn num_slots(&self) -> usize {
        self.slot_global.len()
    }
    pub fn num_global(&self) -> usize {
        self.num_global
    }
    pub fn num_dirichlet(&self) -> usize {
        self.global_dirichlet.iter().filter(|&&b| b).count()
    }
    /// Unique nodes not on the Dirichlet boundary.
    pub fn num_dofs(&self) -> usize {
        self.num_global - self.num_dirichlet()
    }
    #[inline]
    pub fn slot(&self, t: usize, p: LatticePt) -> usize {
        t * self.lattice.size() + self.lattice.index_of(p)
    }
    #[inline]
    pub fn global_id(&self, slot: usize) -> usize {
        self.slot_global[slot] as usize
    }
    #[inline]
    pub fn class_mask(&self, slot: usize) -> usize {
        (self.slot_info[slot] & MASK_CLASS) as usize
    }
    #[inline]
    pub fn is_owner(&self, slot: usize) -> bool {
        self.slot_info[slot] & FLAG_OWNER != 0
    }
    #[inline]
    pub fn is_dirichlet(&self, slot: usize) -> bool {
        self.slot_info[slot] & FLAG_DIRICHLET != 0
    }
    #[inline]
    pub fn multiplicity(&self, slot: usize) -> usize {
        self.slot_mult[slot] as usize
    }
    pub fn is_dirichlet_global(&self, g: usize) -> bool {
        self.global_dirichlet[g]
    }
    pub fn kind_of_slot(&self, slot: usize) -> PrimitiveKind {
        self.mesh.kind_of(self.class_mask(slot).count_ones() as usize)
    }
    pub fn kind_of_global(&self, g: usize) -> PrimitiveKind {
        if g < self.offsets[1] {
            PrimitiveKind::Vertex
        } else if g < self.offsets[2] {
            PrimitiveKind::Edge
        } else if g < self.offsets[3] {
            PrimitiveKind::Face
        } else {
            PrimitiveKind::Volume
        }
    }
    pub fn num_shared(&self) -> usize {
        self.shared_global.len()
    }
    /// Global id of shared group `k` and its slots (ascending).
    pub fn shared_group(&self, k: usize) -> (usize, &[u32]) {
        (
            self.shared_global[k] as usize,
            &self.shared_slots[self.shared_ptr[k]..self.shared_ptr[k + 1]],
        )
    }

    pub fn classify(&self, slot: usize) -> PrimitiveClass {
        let t = slot / self.slots_per_macro();
        let mask = self.class_mask(slot);
        PrimitiveClass { kind: self.kind_of_slot(slot), entity: self.mesh.entity(t, mask) }
    }

    /// Physical position of lattice point `p` of macro `t`. The sum runs over vertices in
    /// ascending global order and skips zero weights, so shared nodes agree bitwise.
    pub fn point(&self, t: usize, p: LatticePt) -> Point {
        let lam = self.lattice.barycentric(p);
        let el = self.mesh.element(t);
        let mut terms: [(usize, i32); 4] = [(usize::MAX, 0); 4];
        for i in 0..el.len() {
            terms[i] = (el[i], lam[i]);
        }
        terms[..el.len()].sort_unstable();
        let inv = 1.0 / self.n() as f64;
        let mut x = [0.0; 3];
        let mut first = true;
        for &(g, l) in &terms[..el.len()] {
            if l == 0 {
                continue;
            }
            let w = l as f64 * inv;
            let v = self.mesh.vertices()[g];
            for d in 0..3 {
                if first {
                    x[d] = w * v[d];
                } else {
                    x[d] += w * v[d];
                }
            }
            first = false;
        }
        x
    }

    pub fn slot_point(&self, slot: usize) -> Point {
        let t = slot / self.slots_per_macro();
        let p = self.lattice_point(slot % self.slots_per_macro());
        self.point(t, p)
    }

    /// Lattice coordinates of local index `k` (inverse of `Lattice::index`).
    pub fn lattice_point(&self, k: usize) -> LatticePt {
        let lat = &self.lattice;
        let c = if lat.dim() == 3 {
            match lat.layer_start.binary_search(&k) {
                Ok(c) => c,
                Err(c) => c - 1,
            }
        } else {
            0
        };
        let mut b = 0;
        while b < lat.n() - c && lat.row_start(b + 1, c) <= k {
            b += 1;
        }
        let a = k - lat.row_start(b, c);
        [a as i32, b as i32, c as i32]
    }

    /// Physical direction offsets `w_j` of macro `t` together with their mirror indices.
    pub fn neighborhood(&self, t: usize) -> NodeNeighborhood {
        let dirs = directions(self.dim());
        let pts = self.mesh.element_points(t);
        let h = 1.0 / self.n() as f64;
        let offsets = dirs
            .iter()
            .map(|d| {
                let mut w = [0.0; 3];
                for k in 0..self.dim() {
                    for i in 0..3 {
                        w[i] += d[k] as f64 * (pts[k + 1][i] - pts[0][i]) * h;
                    }
                }
                w
            })
            .collect();
        NodeNeighborhood { offsets, mirror: (0..dirs.len()).map(mirror).collect() }
    }

    /// Mesh size `H / 2^level` with `H` the longest macro edge of element `t`.
    pub fn h(&self, t: usize) -> f64 {
        let p = self.mesh.element_points(t);
        let mut hmax: f64 = 0.0;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d = sub(&p[i], &p[j]);
                hmax = hmax.max(dot(&d, &d).sqrt());
            }
        }
        hmax / self.n() as f64
    }
}

fn tri_index(a: i32, b: i32, m: i64) -> usize {
    let (a, b, m) = (a as usize, b as usize, m as usize);
    b * (2 * m + 3 - b) / 2 + a
}

fn tet_index(a: i32, b: i32, c: i32, m: i64) -> usize {
    let mut s = 0;
    for cc in 0..c as i64 {
        s += tri_count(m - cc);
    }
    s + tri_index(a, b, m - c as i64)
}

#[derive(Clone, Debug)]
pub struct NodeNeighborhood {
    pub offsets: Vec<Point>,
    pub mirror: Vec<usize>,
}

/// Lattice directions of the 7-point (2D) or 15-point (3D) stencil, in mirror pairs
/// `(2k, 2k+1)`.
pub fn directions(dim: usize) -> &'static [LatticePt] {
    const D2: [LatticePt; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [1, -1, 0], [-1, 1, 0]];
    const D3: [LatticePt; 14] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
        [1, -1, 0],
        [-1, 1, 0],
        [1, 0, -1],
        [-1, 0, 1],
        [0, 1, -1],
        [0, -1, 1],
        [1, -1, 1],
        [-1, 1, -1],
    ];
    if dim == 3 {
        &D3
    } else {
        &D2
    }
}

#[inline]
pub fn mirror(j: usize) -> usize {
    j ^ 1
}

/// Index of a lattice offset in `directions(dim)`.
pub fn direction_index(dim: usize, d: LatticePt) -> Option<usize> {
    directions(dim).iter().position(|&x| x == d)
}
