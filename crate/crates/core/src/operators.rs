//! Matrix-free operator variants over a refined grid.
//!
//! Every slot (a node as seen from one macro element) contributes the partial row
//! `Σ_j w_j (u_j − u_i)` built from the fine elements of its macro element; shared
//! nodes sum their partial rows afterwards. Volume nodes go through specialised
//! kernels, all other rows through the element path over the class-restricted star.

use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use crate::coefficients::{kmin_field, Coefficient, CoefficientField, Component};
use crate::error::{Error, Result};
use crate::mesh::{directions, LatticePt, PrimitiveKind, RefinedGrid};
use crate::oracle::SparseMatrix;
use crate::stencil::{
    cse_plan, direction_opposite, element_matrix, lambda_min, largest_angle_vertex, star, CsePlan, Star, StencilTable,
};

/// Arithmetic used by the kernels; `f64` for computation, a counting type for FLOP census.
pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn of(x: f64) -> Self;
    fn get(self) -> f64;
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn get(self) -> f64 {
        self
    }
}

/// Subset of the non-volume primitive kinds {vertex, edge, face}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PrimitiveSet(u8);

impl PrimitiveSet {
    pub const NONE: PrimitiveSet = PrimitiveSet(0);
    pub const V: PrimitiveSet = PrimitiveSet(1);
    pub const E: PrimitiveSet = PrimitiveSet(2);
    pub const F: PrimitiveSet = PrimitiveSet(4);
    pub const ALL: PrimitiveSet = PrimitiveSet(7);

    pub fn union(self, o: PrimitiveSet) -> PrimitiveSet {
        PrimitiveSet(self.0 | o.0)
    }
    pub fn contains(self, kind: PrimitiveKind) -> bool {
        match kind {
            PrimitiveKind::Vertex => self.0 & 1 != 0,
            PrimitiveKind::Edge => self.0 & 2 != 0,
            PrimitiveKind::Face => self.0 & 4 != 0,
            PrimitiveKind::Volume => false,
        }
    }

    /// Parses `W`, `W_V`, `W_V+W_E`, `V+E`, ... (`W` alone is every kind).
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = PrimitiveSet::NONE;
        for part in s.split(['+', ',', '|']) {
            set = set.union(match part.trim().trim_start_matches("W_").to_ascii_uppercase().as_str() {
                "W" | "ALL" => PrimitiveSet::ALL,
                "V" => PrimitiveSet::V,
                "E" => PrimitiveSet::E,
                "F" => PrimitiveSet::F,
                "" | "NONE" => PrimitiveSet::NONE,
                other => return Err(Error::Config(format!("unknown primitive set `{other}`"))),
            });
        }
        Ok(set)
    }
}

impl std::fmt::Display for PrimitiveSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if *self == PrimitiveSet::ALL {
            return write!(f, "W");
        }
        let mut parts = Vec::new();
        for (bit, name) in [(1, "W_V"), (2, "W_E"), (4, "W_F")] {
            if self.0 & bit != 0 {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    /// Reference stencil, coefficient ignored.
    Constant,
    /// Nodal integration, stencils assembled on the fly.
    NodalFly,
    /// Stencil scaling with `½(κ_i + κ_j)`.
    Scaling,
    /// Scaling with the 2D MA2 safeguard on gray edges of marked macro elements.
    ScalingMa2,
    /// Nodal integration on rows of the given primitive kinds, scaling elsewhere.
    Hybrid(PrimitiveSet),
    /// One-point barycenter quadrature per fine element.
    Midpoint,
    /// Stencils of the inner variant precomputed and stored per slot.
    Stored(Box<Variant>),
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        if let Some(inner) = lower.strip_prefix("stored(").and_then(|r| r.strip_suffix(')')) {
            return Ok(Variant::Stored(Box::new(Variant::parse(inner)?)));
        }
        if let Some(inner) = s.strip_prefix("hybrid(").or_else(|| s.strip_prefix("Hybrid(")).and_then(|r| r.strip_suffix(')')) {
            return Ok(Variant::Hybrid(PrimitiveSet::parse(inner)?));
        }
        Ok(match lower.as_str() {
            "constant" => Variant::Constant,
            "nodal" | "nodalfly" | "nodal_fly" => Variant::NodalFly,
            "scaling" | "scale" | "scale_all" => Variant::Scaling,
            "scalingma2" | "scaling_ma2" | "ma2" => Variant::ScalingMa2,
            "midpoint" => Variant::Midpoint,
            "stored" => Variant::Stored(Box::new(Variant::Scaling)),
            "hybrid" | "scale_vol_face" => Variant::Hybrid(PrimitiveSet::V.union(PrimitiveSet::E)),
            _ => return Err(Error::Config(format!("unknown variant `{s}`"))),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Constant => "constant".into(),
            Variant::NodalFly => "nodal".into(),
            Variant::Scaling => "scaling".into(),
            Variant::ScalingMa2 => "scaling_ma2".into(),
            Variant::Hybrid(s) => format!("hybrid({s})"),
            Variant::Midpoint => "midpoint".into(),
            Variant::Stored(v) => format!("stored({})", v.name()),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            Variant::Hybrid(s) => *s == PrimitiveSet::NONE,
            Variant::Stored(v) => v.is_symmetric(),
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    Constant,
    Nodal,
    Scale,
    ScaleMa2,
    Midpoint,
}

/// Per macro element, per component: stencil tables and scaled element matrices.
#[derive(Clone, Debug)]
struct MacroData {
    tables: Vec<StencilTable>,
    /// `½ ŝ` per component and class mask.
    half: Vec<[[f64; 14]; 16]>,
    /// Per component and direction: (star element, `Â_t[pos][k] / (d+1)`), star order.
    edir: Vec<Vec<Vec<(u8, f64)>>>,
    /// Per component and star element: `Â_t[pos][k]` indexed by local vertex.
    emat_full: Vec<Vec<[f64; 4]>>,
    marked: bool,
    /// Bitmask of the two gray directions (2D MA2).
    gray_bits: u16,
}

#[derive(Clone, Debug)]
struct VolumeRow {
    start: usize,
    len: usize,
    off: [isize; 14],
}

/// Per-macro MA2 diagnostics.
#[derive(Clone, Debug)]
pub struct Ma2Info {
    pub obtuse: bool,
    pub marked: bool,
    pub gray_direction: usize,
    pub lambda_min: f64,
    pub a12: f64,
}

pub struct Operator {
    grid: Arc<RefinedGrid>,
    field: Arc<CoefficientField>,
    variant: Variant,
    macros: Vec<MacroData>,
    rows: Vec<VolumeRow>,
    /// Non-volume lattice points: (local index, point, class mask).
    bpoints: Vec<(usize, LatticePt, usize)>,
    present: [u16; 16],
    kmin: Option<Vec<f64>>,
    /// Barycenter samples per component, per macro, indexed `base * shapes + shape`.
    midpoint: Option<Vec<Vec<f64>>>,
    stored: Option<Vec<f64>>,
    ma2: Vec<Ma2Info>,
    parallel: bool,
}

const STRIDE: usize = 15;

impl Operator {
    /// Samples `coef` on `grid` and builds the operator.
    pub fn new(grid: Arc<RefinedGrid>, coef: &Coefficient, variant: Variant) -> Result<Self> {
        let field = Arc::new(CoefficientField::sample(coef, &grid)?);
        let mut op = Self::with_field(grid, field, variant.clone())?;
        let inner = match &variant {
            Variant::Stored(v) => v.as_ref().clone(),
            v => v.clone(),
        };
        if inner == Variant::Midpoint {
            op.midpoint = Some(midpoint_samples(&op.grid, coef, &op.field)?);
            if matches!(variant, Variant::Stored(_)) {
                op.stored = Some(op.build_stored());
            }
        }
        Ok(op)
    }

    /// Builds the operator from an already sampled field.
    pub fn with_field(grid: Arc<RefinedGrid>, field: Arc<CoefficientField>, variant: Variant) -> Result<Self> {
        let dim = grid.dim();
        if field.components.iter().any(|c| c.values.len() != grid.num_slots()) {
            return Err(Error::Dimension { expected: grid.num_slots(), got: field.components[0].values.len() });
        }
        let st = star(dim);
        let nd = directions(dim).len();
        let mut present = [0u16; 16];
        for (mask, p) in present.iter_mut().enumerate() {
            for (j, list) in st.by_dir.iter().enumerate() {
                if list.iter().any(|&(e, _)| st.inside[mask][e]) {
                    *p |= 1 << j;
                }
            }
        }
        let base = match &variant {
            Variant::Stored(v) => v.as_ref().clone(),
            v => v.clone(),
        };
        if matches!(base, Variant::Stored(_)) {
            return Err(Error::Unsupported("nested stored variant".into()));
        }
        let mut macros = Vec::with_capacity(grid.num_macros());
        let mut ma2 = Vec::with_capacity(grid.num_macros());
        let inv = 1.0 / (dim + 1) as f64;
        let comps: Vec<&Component> = if base == Variant::Constant {
            Vec::new()
        } else {
            field.components.iter().collect()
        };
        for t in 0..grid.num_macros() {
            let metrics: Vec<_> = if comps.is_empty() {
                vec![crate::stencil::IDENTITY3]
            } else {
                comps.iter().map(|c| c.metric).collect()
            };
            let mut tables = Vec::new();
            let mut half = Vec::new();
            let mut edir = Vec::new();
            let mut emat_full = Vec::new();
            for g in &metrics {
                let table = StencilTable::new(&grid, t, g)?;
                let mut h = [[0.0; 14]; 16];
                for mask in 0..16 {
                    for j in 0..nd {
                        h[mask][j] = 0.5 * table.classes[mask][j];
                    }
                }
                let mut ed = vec![Vec::new(); nd];
                let mut ef = Vec::with_capacity(st.elems.len());
                for el in st.elems.iter() {
                    let a = &table.shape_mats[el.shape];
                    let mut row = [0.0; 4];
                    for k in 0..=dim {
                        row[k] = a[el.pos][k];
                    }
                    ef.push(row);
                }
                for (j, list) in st.by_dir.iter().enumerate() {
                    for &(e, k) in list {
                        let el = &st.elems[e];
                        ed[j].push((e as u8, table.shape_mats[el.shape][el.pos][k] * inv));
                    }
                }
                tables.push(table);
                half.push(h);
                edir.push(ed);
                emat_full.push(ef);
            }
            macros.push(MacroData { tables, half, edir, emat_full, marked: false, gray_bits: 0 });
            ma2.push(Ma2Info { obtuse: false, marked: false, gray_direction: usize::MAX, lambda_min: 0.0, a12: 0.0 });
        }

        let lat = grid.lattice();
        let full = (1usize << (dim + 1)) - 1;
        let mut bpoints = Vec::new();
        for (k, p) in lat.points().enumerate() {
            let mask = lat.class_mask(p);
            if mask != full {
                bpoints.push((k, p, mask));
            }
        }
        let rows = volume_rows(&grid);

        let mut op = Operator {
            grid,
            field,
            variant: variant.clone(),
            macros,
            rows,
            bpoints,
            present,
            kmin: None,
            midpoint: None,
            stored: None,
            ma2,
            parallel: cfg!(feature = "parallel"),
        };
        if base == Variant::ScalingMa2 {
            op.setup_ma2()?;
        }
        if matches!(variant, Variant::Stored(_)) && base != Variant::Midpoint {
            op.stored = Some(op.build_stored());
        }
        Ok(op)
    }

    pub fn grid(&self) -> &Arc<RefinedGrid> {
        &self.grid
    }
    pub fn field(&self) -> &Arc<CoefficientField> {
        &self.field
    }
    pub fn variant(&self) -> &Variant {
        &self.variant
    }
    pub fn ma2_info(&self) -> &[Ma2Info] {
        &self.ma2
    }
    pub fn kmin(&self) -> Option<&[f64]> {
        self.kmin.as_deref()
    }

    /// Selects parallel (rayon) or sequential execution; sequential is the bit reference
    /// and both give identical results. Without the `parallel` feature this is a no-op.
    pub fn set_parallel(&mut self, on: bool) {
        self.parallel = on && cfg!(feature = "parallel");
    }

    /// Bytes held by the stored stencils (15 values per volume node = 120 N).
    pub fn stored_bytes(&self) -> usize {
        self.stored.as_ref().map_or(0, |s| s.len() * 8)
    }

    /// Stored copy of this operator: per-slot weights computed once.
    pub fn store(&self) -> Result<Operator> {
        if matches!(self.variant, Variant::Stored(_)) {
            return Err(Error::Unsupported("already stored".into()));
        }
        let mut op = Operator {
            grid: self.grid.clone(),
            field: self.field.clone(),
            variant: Variant::Stored(Box::new(self.variant.clone())),
            macros: self.macros.clone(),
            rows: self.rows.clone(),
            bpoints: self.bpoints.clone(),
            present: self.present,
            kmin: self.kmin.clone(),
            midpoint: self.midpoint.clone(),
            stored: None,
            ma2: self.ma2.clone(),
            parallel: self.parallel,
        };
        op.stored = Some(op.build_stored());
        Ok(op)
    }

    fn base_variant(&self) -> &Variant {
        match &self.variant {
            Variant::Stored(v) => v,
            v => v,
        }
    }

    fn rule_for(&self, kind: PrimitiveKind) -> Rule {
        match self.base_variant() {
            Variant::Constant => Rule::Constant,
            Variant::NodalFly => Rule::Nodal,
            Variant::Scaling => Rule::Scale,
            Variant::ScalingMa2 => Rule::ScaleMa2,
            Variant::Midpoint => Rule::Midpoint,
            Variant::Hybrid(set) => {
                if set.contains(kind) {
                    Rule::Nodal
                } else {
                    Rule::Scale
                }
            }
            Variant::Stored(_) => unreachable!(),
        }
    }

    fn ma2_setup_needed(&self) -> bool {
        matches!(self.base_variant(), Variant::ScalingMa2)
    }

    fn setup_ma2(&mut self) -> Result<()> {
        if self.grid.dim() != 2 {
            log::warn!("MA2 is only defined in 2D; 3D ScalingMA2 falls back to plain scaling");
            return Ok(());
        }
        if !self.field.scalar {
            return Err(Error::Unsupported("MA2 needs a scalar coefficient".into()));
        }
        let k = self.field.values().to_vec();
        let kmin = kmin_field(&self.grid, &k);
        for t in 0..self.grid.num_macros() {
            let pts = self.grid.mesh().element_points(t);
            let v = largest_angle_vertex(&pts);
            let a = crate::stencil::element_stiffness(2, &pts)?;
            let a12 = a[(v + 1) % 3][(v + 2) % 3];
            let lmin = lambda_min(&pts)?;
            let gray = direction_opposite(v);
            let obtuse = a12 > 1e-12 * a[v][v].abs();
            let marked = obtuse && ma2_marks(&self.grid, &k, t, gray, a12, lmin);
            self.ma2[t] = Ma2Info { obtuse, marked, gray_direction: gray, lambda_min: lmin, a12 };
            self.macros[t].marked = marked;
            self.macros[t].gray_bits = (1 << gray) | (1 << (gray ^ 1));
        }
        self.kmin = Some(kmin);
        let _ = self.ma2_setup_needed();
        Ok(())
    }

    // ---------------------------------------------------------------- weights

    /// Neighbour local indices of lattice point `p` for the present directions.
    fn neighbours(&self, p: LatticePt, present: u16) -> [usize; 14] {
        let lat = self.grid.lattice();
        let mut nb = [0usize; 14];
        for (j, d) in directions(self.grid.dim()).iter().enumerate() {
            if present >> j & 1 == 1 {
                nb[j] = lat.index_of([p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
            }
        }
        nb
    }

    /// Partial-row weights of local node `i` of macro `t` (all slices macro-local).
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn weights<S: Scalar>(
        &self,
        rule: Rule,
        t: usize,
        mask: usize,
        i: usize,
        nb: &[usize; 14],
        present: u16,
        w: &mut [S; 14],
        full: bool,
    ) {
        let per = self.grid.slots_per_macro();
        let base = t * per;
        let md = &self.macros[t];
        let nd = directions(self.grid.dim()).len();
        match rule {
            Rule::Constant => {
                let c = &md.tables[0].classes[mask];
                for j in 0..nd {
                    if present >> j & 1 == 1 {
                        w[j] = S::of(c[j]);
                    }
                }
            }
            Rule::Scale | Rule::ScaleMa2 => {
                let comps = &self.field.components;
                let gray = if rule == Rule::ScaleMa2 && md.marked { md.gray_bits } else { 0 };
                for j in 0..nd {
                    if present >> j & 1 == 0 {
                        continue;
                    }
                    let mut acc;
                    if gray >> j & 1 == 1 {
                        let km = &self.kmin.as_ref().unwrap()[base..base + per];
                        acc = (S::of(km[i]) + S::of(km[nb[j]])) * S::of(md.half[0][mask][j]);
                    } else {
                        let k = &comps[0].values[base..base + per];
                        acc = (S::of(k[i]) + S::of(k[nb[j]])) * S::of(md.half[0][mask][j]);
                    }
                    for (m, c) in comps.iter().enumerate().skip(1) {
                        let k = &c.values[base..base + per];
                        acc = acc + (S::of(k[i]) + S::of(k[nb[j]])) * S::of(md.half[m][mask][j]);
                    }
                    w[j] = acc;
                }
            }
            Rule::Nodal => self.nodal_weights(t, mask, i, nb, present, w, full),
            Rule::Midpoint => {
                let st = star(self.grid.dim());
                let mp = self.midpoint.as_ref().expect("midpoint samples");
                let p = self.grid.lattice_point(i);
                let lat = self.grid.lattice();
                let nshape = crate::mesh::num_shapes(self.grid.dim());
                let mut first = [true; 14];
                for (m, samples) in mp.iter().enumerate() {
                    let ef = &md.emat_full[m];
                    for (e, el) in st.elems.iter().enumerate() {
                        if !st.inside[mask][e] {
                            continue;
                        }
                        let b = [p[0] + el.offsets[0][0], p[1] + el.offsets[0][1], p[2] + el.offsets[0][2]];
                        let kt = samples[(base + lat.index_of(b)) * nshape + el.shape];
                        for k in 0..=self.grid.dim() {
                            if k == el.pos {
                                continue;
                            }
                            let j = el.dirs[k];
                            let term = S::of(ef[e][k]) * S::of(kt);
                            w[j] = if first[j] { term } else { w[j] + term };
                            first[j] = false;
                        }
                    }
                }
            }
        }
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn nodal_weights<S: Scalar>(
        &self,
        t: usize,
        mask: usize,
        i: usize,
        nb: &[usize; 14],
        present: u16,
        w: &mut [S; 14],
        full: bool,
    ) {
        let dim = self.grid.dim();
        let st: &Star = star(dim);
        let plan: &CsePlan = cse_plan(dim);
        let per = self.grid.slots_per_macro();
        let base = t * per;
        let md = &self.macros[t];
        let nd = directions(dim).len();
        let inside = &st.inside[mask];
        let mut ks = [S::of(0.0); 24];
        for (m, c) in self.field.components.iter().enumerate() {
            let k = &c.values[base..base + per];
            let kc = S::of(k[i]);
            if full {
                // shared partial sums
                let mut pairs = [S::of(0.0); 4];
                for (q, &d) in plan.pairs.iter().enumerate() {
                    pairs[q] = kc + S::of(k[nb[d]]);
                }
                if dim == 3 {
                    let mut tri = [S::of(0.0); 12];
                    for (q, &(pp, d)) in plan.triples.iter().enumerate() {
                        tri[q] = pairs[pp] + S::of(k[nb[d]]);
                    }
                    for (e, &(src, d)) in plan.elems.iter().enumerate() {
                        ks[e] = tri[src] + S::of(k[nb[d]]);
                    }
                } else {
                    for (e, &(src, d)) in plan.elems.iter().enumerate() {
                        ks[e] = pairs[src] + S::of(k[nb[d]]);
                    }
                }
            } else {
                // same association order, one element at a time
                for e in 0..st.elems.len() {
                    if !inside[e] {
                        continue;
                    }
                    let order = plan.order(e);
                    let mut s = kc + S::of(k[nb[order[0]]]);
                    for &d in &order[1..] {
                        s = s + S::of(k[nb[d]]);
                    }
                    ks[e] = s;
                }
            }
            let ed = &md.edir[m];
            for j in 0..nd {
                if present >> j & 1 == 0 {
                    continue;
                }
                let mut acc: Option<S> = None;
                for &(e, c) in &ed[j] {
                    if !full && !inside[e as usize] {
                        continue;
                    }
                    let term = S::of(c) * ks[e as usize];
                    acc = Some(match acc {
                        None => term,
                        Some(a) => a + term,
                    });
                }
                let a = acc.expect("present direction has an element");
                w[j] = if m == 0 { a } else { w[j] + a };
            }
        }
    }

    /// `Σ_j w_j (u_j − u_i)` over present directions.
    #[inline(always)]
    fn apply_row<S: Scalar>(w: &[S; 14], present: u16, u: &[f64], i: usize, nb: &[usize; 14], nd: usize) -> S {
        let ui = S::of(u[i]);
        let mut acc: Option<S> = None;
        for j in 0..nd {
            if present >> j & 1 == 0 {
                continue;
            }
            let term = w[j] * (S::of(u[nb[j]]) - ui);
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
        acc.unwrap_or(S::of(0.0))
    }

    /// `Σ_j ŝ_j u_j + ŝ_c u_i`, the constant stencil's direct form.
    #[inline(always)]
    fn apply_row_constant<S: Scalar>(c: &[f64; 15], present: u16, u: &[f64], i: usize, nb: &[usize; 14], nd: usize) -> S {
        let mut acc: Option<S> = None;
        for j in 0..nd {
            if present >> j & 1 == 0 {
                continue;
            }
            let term = S::of(c[j]) * S::of(u[nb[j]]);
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
        let center = S::of(c[14]) * S::of(u[i]);
        match acc {
            None => center,
            Some(a) => a + center,
        }
    }

    /// Partial row of local node `i` in macro `t` applied to the macro-local slice `u`.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn row<S: Scalar>(&self, t: usize, mask: usize, kind: PrimitiveKind, i: usize, nb: &[usize; 14], u: &[f64], full: bool) -> S {
        let present = self.present[mask];
        let nd = directions(self.grid.dim()).len();
        if let Some(stored) = &self.stored {
            let off = (t * self.grid.slots_per_macro() + i) * STRIDE;
            let s = &stored[off..off + 14];
            let mut w = [S::of(0.0); 14];
            for j in 0..nd {
                w[j] = S::of(s[j]);
            }
            return Self::apply_row(&w, present, u, i, nb, nd);
        }
        let rule = self.rule_for(kind);
        if rule == Rule::Constant {
            return Self::apply_row_constant(&self.macros[t].tables[0].classes[mask], present, u, i, nb, nd);
        }
        let mut w = [S::of(0.0); 14];
        self.weights(rule, t, mask, i, nb, present, &mut w, full);
        Self::apply_row(&w, present, u, i, nb, nd)
    }

    /// Off-center partial weights and the present-direction mask of slot `(t, p)`.
    pub fn slot_weights(&self, t: usize, p: LatticePt) -> ([f64; 14], u16) {
        let lat = self.grid.lattice();
        let mask = lat.class_mask(p);
        let present = self.present[mask];
        let i = lat.index_of(p);
        if let Some(stored) = &self.stored {
            let off = (t * self.grid.slots_per_macro() + i) * STRIDE;
            let mut w = [0.0; 14];
            w.copy_from_slice(&stored[off..off + 14]);
            return (w, present);
        }
        let nb = self.neighbours(p, present);
        let kind = self.grid.mesh().kind_of(mask.count_ones() as usize);
        let rule = self.rule_for(kind);
        let full = mask == (1 << (self.grid.dim() + 1)) - 1;
        let mut w = [0.0; 14];
        if rule == Rule::Constant {
            w.copy_from_slice(&self.macros[t].tables[0].classes[mask][..14]);
            for (j, x) in w.iter_mut().enumerate() {
                if present >> j & 1 == 0 {
                    *x = 0.0;
                }
            }
        } else {
            self.weights(rule, t, mask, i, &nb, present, &mut w, full);
        }
        (w, present)
    }

    fn build_stored(&self) -> Vec<f64> {
        let per = self.grid.slots_per_macro();
        let mut out = vec![0.0; self.grid.num_slots() * STRIDE];
        let pts: Vec<LatticePt> = self.grid.lattice().points().collect();
        for t in 0..self.grid.num_macros() {
            for (k, &p) in pts.iter().enumerate() {
                let (w, present) = self.slot_weights(t, p);
                let o = (t * per + k) * STRIDE;
                let mut c = 0.0;
                for j in 0..14 {
                    if present >> j & 1 == 1 {
                        out[o + j] = w[j];
                        c -= w[j];
                    }
                }
                out[o + 14] = c;
            }
        }
        out
    }

    // ---------------------------------------------------------------- apply

    fn apply_macro(&self, t: usize, u: &[f64], out: &mut [f64]) {
        let grid = &self.grid;
        let per = grid.slots_per_macro();
        let base = t * per;
        let ul = &u[base..base + per];
        let dim = grid.dim();
        let full = (1usize << (dim + 1)) - 1;
        let vol_kind = PrimitiveKind::Volume;
        for r in &self.rows {
            for i in r.start..r.start + r.len {
                let mut nb = [0usize; 14];
                for j in 0..directions(dim).len() {
                    nb[j] = (i as isize + r.off[j]) as usize;
                }
                out[i] = self.row::<f64>(t, full, vol_kind, i, &nb, ul, true);
            }
        }
        for &(i, p, mask) in &self.bpoints {
            if grid.is_dirichlet(base + i) {
                out[i] = ul[i];
                continue;
            }
            let nb = self.neighbours(p, self.present[mask]);
            let kind = grid.mesh().kind_of(mask.count_ones() as usize);
            out[i] = self.row::<f64>(t, mask, kind, i, &nb, ul, false);
        }
    }

    /// `out = A u` with identity rows on the Dirichlet boundary. `u` must be consistent
    /// (all copies of a shared node equal); the result is consistent.
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let per = self.grid.slots_per_macro();
        assert_eq!(u.len(), self.grid.num_slots());
        assert_eq!(out.len(), self.grid.num_slots());
        #[cfg(feature = "parallel")]
        if self.parallel {
            use rayon::prelude::*;
            out.par_chunks_mut(per).enumerate().for_each(|(t, o)| self.apply_macro(t, u, o));
            self.sync_rows(u, out);
            return;
        }
        for (t, o) in out.chunks_mut(per).enumerate() {
            self.apply_macro(t, u, o);
        }
        self.sync_rows(u, out);
    }

    /// Sums partial rows of shared nodes; Dirichlet nodes keep `u`.
    fn sync_rows(&self, u: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        for k in 0..g.num_shared() {
            let (_, slots) = g.shared_group(k);
            let s0 = slots[0] as usize;
            if g.is_dirichlet(s0) {
                for &s in slots {
                    out[s as usize] = u[s0];
                }
                continue;
            }
            let mut sum = out[s0];
            for &s in &slots[1..] {
                sum += out[s as usize];
            }
            for &s in slots {
                out[s as usize] = sum;
            }
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.apply_into(u, &mut out);
        out
    }

    /// `r = f − A u` on free nodes, zero on the Dirichlet boundary.
    pub fn residual_into(&self, u: &[f64], f: &[f64], r: &mut [f64]) {
        self.apply_into(u, r);
        for s in 0..r.len() {
            r[s] = if self.grid.is_dirichlet(s) { 0.0 } else { f[s] - r[s] };
        }
    }

    pub fn residual(&self, u: &[f64], f: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; u.len()];
        self.residual_into(u, f, &mut r);
        r
    }

    /// Runs the volume kernel of macro `t` only, writing volume rows of `out`.
    pub fn apply_volume(&self, t: usize, u: &[f64], out: &mut [f64]) {
        let per = self.grid.slots_per_macro();
        let base = t * per;
        let dim = self.grid.dim();
        let full = (1usize << (dim + 1)) - 1;
        let ul = &u[base..base + per];
        for r in &self.rows {
            for i in r.start..r.start + r.len {
                let mut nb = [0usize; 14];
                for j in 0..directions(dim).len() {
                    nb[j] = (i as isize + r.off[j]) as usize;
                }
                out[base + i] = self.row::<f64>(t, full, PrimitiveKind::Volume, i, &nb, ul, true);
            }
        }
    }

    /// Residual over volume nodes of every macro element (the benchmark kernel).
    pub fn residual_volume(&self, u: &[f64], f: &[f64], r: &mut [f64]) {
        let per = self.grid.slots_per_macro();
        let run = |t: usize, rc: &mut [f64]| {
            let base = t * per;
            let dim = self.grid.dim();
            let full = (1usize << (dim + 1)) - 1;
            let ul = &u[base..base + per];
            for row in &self.rows {
                for i in row.start..row.start + row.len {
                    let mut nb = [0usize; 14];
                    for j in 0..directions(dim).len() {
                        nb[j] = (i as isize + row.off[j]) as usize;
                    }
                    rc[i] = f[base + i] - self.row::<f64>(t, full, PrimitiveKind::Volume, i, &nb, ul, true);
                }
            }
        };
        #[cfg(feature = "parallel")]
        if self.parallel {
            use rayon::prelude::*;
            r.par_chunks_mut(per).enumerate().for_each(|(t, rc)| run(t, rc));
            return;
        }
        for (t, rc) in r.chunks_mut(per).enumerate() {
            run(t, rc);
        }
    }

    /// Evaluates the volume kernel at one interior node with scalar type `S`; used to
    /// census operations. Returns `None` when the grid has no volume node.
    pub fn volume_node_with<S: Scalar>(&self, u: &[f64]) -> Option<S> {
        let r = self.rows.first()?;
        let dim = self.grid.dim();
        let full = (1usize << (dim + 1)) - 1;
        let per = self.grid.slots_per_macro();
        let i = r.start;
        let mut nb = [0usize; 14];
        for j in 0..directions(dim).len() {
            nb[j] = (i as isize + r.off[j]) as usize;
        }
        Some(self.row::<S>(0, full, PrimitiveKind::Volume, i, &nb, &u[..per], true))
    }

    pub fn num_volume_nodes_per_macro(&self) -> usize {
        self.rows.iter().map(|r| r.len).sum()
    }

    // ---------------------------------------------------------------- smoothing

    /// Forward Gauss–Seidel (SOR with factor `omega`): shared nodes by global id, then
    /// volume nodes lexicographically per macro element.
    pub fn gauss_seidel(&self, u: &mut [f64], f: &[f64], sweeps: usize, omega: f64) -> Result<()> {
        let g = &self.grid;
        let dim = g.dim();
        let nd = directions(dim).len();
        let per = g.slots_per_macro();
        let lat = g.lattice();
        let full = (1usize << (dim + 1)) - 1;
        for _ in 0..sweeps {
            for k in 0..g.num_shared() {
                let (gid, slots) = g.shared_group(k);
                if g.is_dirichlet(slots[0] as usize) {
                    continue;
                }
                let mut diag = 0.0;
                let mut off = 0.0;
                for &s in slots {
                    let s = s as usize;
                    let t = s / per;
                    let i = s % per;
                    let p = lat_point(g, i);
                    let (w, present) = self.slot_weights(t, p);
                    let nb = self.neighbours(p, present);
                    for j in 0..nd {
                        if present >> j & 1 == 1 {
                            diag -= w[j];
                            off += w[j] * u[t * per + nb[j]];
                        }
                    }
                }
                if diag == 0.0 {
                    return Err(Error::ZeroDiagonal(gid));
                }
                let s0 = slots[0] as usize;
                let new = (f[s0] - off) / diag;
                let val = u[s0] + omega * (new - u[s0]);
                for &s in slots {
                    u[s as usize] = val;
                }
            }
            for t in 0..g.num_macros() {
                let base = t * per;
                for r in &self.rows {
                    for i in r.start..r.start + r.len {
                        let mut nb = [0usize; 14];
                        for j in 0..nd {
                            nb[j] = (i as isize + r.off[j]) as usize;
                        }
                        let present = self.present[full];
                        let mut w = [0.0; 14];
                        if let Some(stored) = &self.stored {
                            let o = (base + i) * STRIDE;
                            w[..nd].copy_from_slice(&stored[o..o + nd]);
                        } else {
                            let rule = self.rule_for(PrimitiveKind::Volume);
                            if rule == Rule::Constant {
                                w[..nd].copy_from_slice(&self.macros[t].tables[0].classes[full][..nd]);
                            } else {
                                self.weights(rule, t, full, i, &nb, present, &mut w, true);
                            }
                        }
                        let mut diag = 0.0;
                        let mut off = 0.0;
                        for j in 0..nd {
                            diag -= w[j];
                            off += w[j] * u[base + nb[j]];
                        }
                        if diag == 0.0 {
                            return Err(Error::ZeroDiagonal(g.global_id(base + i)));
                        }
                        let new = (f[base + i] - off) / diag;
                        u[base + i] += omega * (new - u[base + i]);
                    }
                }
            }
            let _ = lat;
        }
        Ok(())
    }

    // ---------------------------------------------------------------- assembly

    /// Global matrix on the free nodes, rows built from the operator's own weights.
    pub fn assemble(&self) -> SparseMatrix {
        let g = &self.grid;
        let (dof, n) = crate::oracle::dof_numbering(g);
        let per = g.slots_per_macro();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let pts: Vec<LatticePt> = g.lattice().points().collect();
        for s in 0..g.num_slots() {
            let gi = g.global_id(s);
            let r = dof[gi];
            if r == usize::MAX {
                continue;
            }
            let t = s / per;
            let p = pts[s % per];
            let (w, present) = self.slot_weights(t, p);
            let nb = self.neighbours(p, present);
            let mut diag = 0.0;
            for j in 0..14 {
                if present >> j & 1 == 1 {
                    diag -= w[j];
                    let c = dof[g.global_id(t * per + nb[j])];
                    if c != usize::MAX {
                        rows[r].push((c, w[j]));
                    }
                }
            }
            rows[r].push((r, diag));
        }
        SparseMatrix::from_rows(n, rows)
    }
}

fn lat_point(g: &RefinedGrid, i: usize) -> LatticePt {
    g.lattice_point(i)
}

fn volume_rows(grid: &RefinedGrid) -> Vec<VolumeRow> {
    let lat = grid.lattice();
    let n = grid.n() as i64;
    let dim = grid.dim();
    let dirs = directions(dim);
    let mut rows = Vec::new();
    let cmax = if dim == 3 { n } else { 1 };
    let c0 = if dim == 3 { 1 } else { 0 };
    for c in c0..cmax {
        for b in 1..n {
            let len = n - 1 - b - c;
            if len < 1 {
                continue;
            }
            let here = lat.row_start(b as usize, c as usize) as isize;
            let mut off = [0isize; 14];
            for (j, d) in dirs.iter().enumerate() {
                let there = lat.row_start((b + d[1] as i64) as usize, (c + d[2] as i64) as usize) as isize;
                off[j] = there + d[0] as isize - here;
            }
            rows.push(VolumeRow { start: here as usize + 1, len: len as usize, off });
        }
    }
    rows
}

/// Decides MA2 marking of macro triangle `t`: any gray edge with
/// `(k_e − k_{e;min}) a12 > k_{e;min} λ_min`, where `k_e = ½(k_i + k_j)` and `k_{e;min}`
/// is the minimum of `k_ẽ` over the edges of the fine elements of `T` containing `e`.
fn ma2_marks(grid: &RefinedGrid, k: &[f64], t: usize, gray: usize, a12: f64, lmin: f64) -> bool {
    for (e, kmod) in ma2_edge_factors(grid, k, t, gray, a12, lmin) {
        let _ = e;
        if kmod.is_some() {
            return true;
        }
    }
    false
}

/// Strict per-edge MA2: for every gray edge of macro `t` (as a pair of local lattice
/// indices), `Some(k_e^mod)` when the condition triggers, `None` otherwise.
pub fn ma2_edge_factors(
    grid: &RefinedGrid,
    k: &[f64],
    t: usize,
    gray: usize,
    a12: f64,
    lmin: f64,
) -> Vec<((usize, usize), Option<f64>)> {
    let lat = grid.lattice();
    let per = grid.slots_per_macro();
    let base = t * per;
    let d = directions(2)[gray];
    let elems = lat.elements();
    let mut out = Vec::new();
    for p in lat.points() {
        let q = [p[0] + d[0], p[1] + d[1], 0];
        if !lat.contains(q) {
            continue;
        }
        let (ip, iq) = (lat.index_of(p), lat.index_of(q));
        let ke = 0.5 * (k[base + ip] + k[base + iq]);
        let mut kmin = f64::INFINITY;
        for (v, _) in &elems {
            let has = |x: LatticePt| v[..3].contains(&x);
            if !(has(p) && has(q)) {
                continue;
            }
            for a in 0..3 {
                for b in a + 1..3 {
                    let (ia, ib) = (lat.index_of(v[a]), lat.index_of(v[b]));
                    kmin = kmin.min(0.5 * (k[base + ia] + k[base + ib]));
                }
            }
        }
        let trig = (ke - kmin) * a12 > kmin * lmin;
        out.push(((ip, iq), if trig { Some(kmin * (1.0 + lmin / a12)) } else { None }));
    }
    out
}

/// Coefficient components at the barycenter of every fine element, indexed by
/// `(macro slot of the element's base point) * shapes + shape`.
fn midpoint_samples(grid: &RefinedGrid, coef: &Coefficient, field: &CoefficientField) -> Result<Vec<Vec<f64>>> {
    let dim = grid.dim();
    let nshape = crate::mesh::num_shapes(dim);
    let per = grid.slots_per_macro();
    let metrics = crate::coefficients::component_metrics(dim);
    // index of every field component in the full decomposition
    let which: Vec<usize> = field
        .components
        .iter()
        .map(|c| if field.scalar { 0 } else { metrics.iter().position(|m| *m == c.metric).unwrap_or(0) })
        .collect();
    let mut out = vec![vec![0.0; grid.num_slots() * nshape]; which.len()];
    let lat = grid.lattice();
    let elems = lat.elements();
    for t in 0..grid.num_macros() {
        for (v, s) in &elems {
            let mut x = [0.0; 3];
            for vk in &v[..=dim] {
                let p = grid.point(t, *vk);
                for i in 0..3 {
                    x[i] += p[i] / (dim + 1) as f64;
                }
            }
            let k = coef.tensor_f64(&x);
            let idx = (t * per + lat.index_of(v[0])) * nshape + s;
            if field.scalar {
                out[0][idx] = k[0][0];
            } else {
                let vals: Vec<f64> = if dim == 2 {
                    crate::coefficients::tensor_decompose_2d(&k).to_vec()
                } else {
                    crate::coefficients::tensor_decompose_3d(&k).to_vec()
                };
                for (m, &w) in which.iter().enumerate() {
                    out[m][idx] = vals[w];
                }
            }
        }
    }
    Ok(out)
}

/// Element matrix of a fine element given by physical points, exposed for oracles.
pub fn fine_element_matrix(dim: usize, pts: &[[f64; 3]], metric: &crate::stencil::Sym3) -> Result<crate::stencil::Mat4> {
    element_matrix(dim, pts, metric)
}
