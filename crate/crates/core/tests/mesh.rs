use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use hhg_core::mesh::{directions, mirror, Diagonal, MacroMesh, PrimitiveKind, RefinedGrid};
use hhg_core::Error;

fn grid(mesh: MacroMesh, level: usize) -> RefinedGrid {
    RefinedGrid::new(Arc::new(mesh), level)
}

fn mid(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]
}

/// Recursive Bey refinement, independent of the lattice enumeration.
fn bey(t: [[f64; 3]; 4], level: usize, out: &mut Vec<[[f64; 3]; 4]>) {
    if level == 0 {
        out.push(t);
        return;
    }
    let [x0, x1, x2, x3] = t;
    let (x01, x02, x03) = (mid(x0, x1), mid(x0, x2), mid(x0, x3));
    let (x12, x13, x23) = (mid(x1, x2), mid(x1, x3), mid(x2, x3));
    for c in [
        [x0, x01, x02, x03],
        [x01, x1, x12, x13],
        [x02, x12, x2, x23],
        [x03, x13, x23, x3],
        [x01, x02, x03, x13],
        [x01, x02, x12, x13],
        [x02, x03, x13, x23],
        [x02, x12, x13, x23],
    ] {
        bey(c, level - 1, out);
    }
}

fn key(pts: &[[f64; 3]]) -> Vec<[i64; 3]> {
    let mut v: Vec<[i64; 3]> = pts
        .iter()
        .map(|p| [(p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64, (p[2] * 1e9).round() as i64])
        .collect();
    v.sort();
    v
}

fn lattice_tets(g: &RefinedGrid, t: usize) -> Vec<Vec<[f64; 3]>> {
    g.lattice()
        .elements()
        .into_iter()
        .map(|(v, _)| v[..=g.dim()].iter().map(|&p| g.point(t, p)).collect())
        .collect()
}

fn signature(p: &[[f64; 3]]) -> Vec<i64> {
    let mut s = Vec::new();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let d = [p[i][0] - p[j][0], p[i][1] - p[j][1], p[i][2] - p[j][2]];
            s.push(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) * 1e9).round() as i64);
        }
    }
    s.sort();
    s
}

#[test]
fn lattice_elements_match_recursive_bey() {
    for mesh in [MacroMesh::reference_tetrahedron(), MacroMesh::regular_tetrahedron()] {
        let pts = mesh.element_points(0);
        for level in 0..=3 {
            let g = grid(mesh.clone(), level);
            let mut oracle = Vec::new();
            bey([pts[0], pts[1], pts[2], pts[3]], level, &mut oracle);
            let a: BTreeSet<_> = oracle.iter().map(|t| key(t)).collect();
            let b: BTreeSet<_> = lattice_tets(&g, 0).iter().map(|t| key(t)).collect();
            assert_eq!(oracle.len(), 1 << (3 * level));
            assert_eq!(a, b, "level {level}");
        }
    }
}

#[test]
fn three_congruence_classes() {
    let g = grid(MacroMesh::reference_tetrahedron(), 2);
    let tets = lattice_tets(&g, 0);
    assert_eq!(tets.len(), 64);
    let classes: BTreeSet<_> = tets.iter().map(|t| signature(t)).collect();
    assert_eq!(classes.len(), 3);
    for level in 1..=3 {
        let g = grid(MacroMesh::new(3, vec![[0.0, 0.0, 0.0], [1.3, 0.1, 0.0], [0.2, 0.9, 0.1], [0.3, 0.2, 1.1]], vec![vec![0, 1, 2, 3]]).unwrap(), level);
        let classes: BTreeSet<_> = lattice_tets(&g, 0).iter().map(|t| signature(t)).collect();
        assert_eq!(classes.len(), 3, "level {level}");
    }
}

#[test]
fn fine_elements_tile_the_macro_element() {
    for (mesh, level) in [(MacroMesh::unit_cube_12(), 3), (MacroMesh::obtuse_square(), 3)] {
        let g = grid(mesh, level);
        let d = g.dim();
        let mut total = 0.0;
        for t in 0..g.num_macros() {
            let mut vol = 0.0;
            for p in lattice_tets(&g, t) {
                let v = hhg_core::mesh::simplex_measure(d, &p);
                assert!(v.abs() > 0.0);
                vol += v.abs();
            }
            let macro_vol = hhg_core::mesh::simplex_measure(d, &g.mesh().element_points(t)).abs();
            assert!((vol - macro_vol).abs() < 1e-13);
            assert_eq!(lattice_tets(&g, t).len(), 1 << (d * level));
            total += vol;
        }
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn count_laws() {
    let g = grid(MacroMesh::unit_square(), 1);
    assert_eq!(g.num_global(), 9);
    assert_eq!(g.lattice().elements().len() * g.num_macros(), 8);

    let g = grid(MacroMesh::unit_cube_6(), 3);
    assert_eq!(g.num_dofs(), 343);
    let g = grid(MacroMesh::unit_cube_12(), 3);
    assert_eq!(g.num_dofs(), 855);

    for level in 0..=3 {
        let n = 1usize << level;
        let g = grid(MacroMesh::unit_cube_6(), level);
        assert_eq!(g.num_global(), (n + 1).pow(3));
        assert_eq!(g.num_dofs(), (n - 1).pow(3));
        let g = grid(MacroMesh::square_grid(3, 2, Diagonal::Backward), level);
        assert_eq!(g.num_global(), (3 * n + 1) * (2 * n + 1));
        let vol = (0..g.num_slots())
            .filter(|&s| g.kind_of_slot(s) == PrimitiveKind::Volume)
            .count();
        let per = if n >= 3 { (n - 1) * (n - 2) / 2 } else { 0 };
        assert_eq!(vol, 12 * per);
        let g = grid(MacroMesh::reference_tetrahedron(), level);
        let vol = (0..g.num_slots()).filter(|&s| g.kind_of_slot(s) == PrimitiveKind::Volume).count();
        let per = if n >= 4 { (n - 1) * (n - 2) * (n - 3) / 6 } else { 0 };
        assert_eq!(vol, per);
    }
}

#[test]
fn shared_nodes_are_bit_identical() {
    for mesh in [MacroMesh::unit_cube_12(), MacroMesh::obtuse_square(), MacroMesh::box_kuhn([0.8, 0.0, 0.0], [1.0, 3.0, 4.0], [1, 2, 2])] {
        let g = grid(mesh, 3);
        let mut seen: HashMap<usize, [u64; 3]> = HashMap::new();
        for s in 0..g.num_slots() {
            let p = g.slot_point(s);
            let bits = [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()];
            let e = seen.entry(g.global_id(s)).or_insert(bits);
            assert_eq!(*e, bits);
        }
        assert_eq!(seen.len(), g.num_global());
        // distinct global ids are distinct points
        let pts: BTreeSet<_> = seen.values().collect();
        assert_eq!(pts.len(), g.num_global());
        for k in 0..g.num_shared() {
            let (gid, slots) = g.shared_group(k);
            assert!(g.is_owner(slots[0] as usize));
            for &s in &slots[1..] {
                assert!(!g.is_owner(s as usize));
            }
            for &s in slots {
                assert_eq!(g.global_id(s as usize), gid);
                assert_eq!(g.multiplicity(s as usize), slots.len());
            }
        }
    }
}

#[test]
fn classification() {
    let g = grid(MacroMesh::unit_square(), 1);
    let mut by_kind: HashMap<usize, PrimitiveKind> = HashMap::new();
    for s in 0..g.num_slots() {
        by_kind.insert(g.global_id(s), g.kind_of_slot(s));
    }
    let count = |k| by_kind.values().filter(|&&x| x == k).count();
    assert_eq!(count(PrimitiveKind::Vertex), 4);
    assert_eq!(count(PrimitiveKind::Edge), 5);
    assert_eq!(count(PrimitiveKind::Volume), 0);
    let center = (0..g.num_slots()).find(|&s| g.slot_point(s) == [0.5, 0.5, 0.0]).unwrap();
    assert_eq!(g.kind_of_slot(center), PrimitiveKind::Edge);

    for level in 0..=3 {
        let g = grid(MacroMesh::unit_cube_12(), level);
        let interior_vertices: BTreeSet<_> = (0..g.num_slots())
            .filter(|&s| g.kind_of_slot(s) == PrimitiveKind::Vertex && !g.is_dirichlet(s))
            .map(|s| g.global_id(s))
            .collect();
        assert_eq!(interior_vertices.len(), 1);
        if level == 0 {
            assert!((0..g.num_slots()).all(|s| g.kind_of_slot(s) == PrimitiveKind::Vertex));
        }
    }
    let g = grid(MacroMesh::unit_cube_6(), 2);
    for s in 0..g.num_slots() {
        let p = g.slot_point(s);
        let on_boundary = p.iter().any(|&x| x == 0.0 || x == 1.0);
        assert_eq!(g.is_dirichlet(s), on_boundary);
    }
}

#[test]
fn neighborhood_offsets() {
    let g = grid(MacroMesh::unit_square(), 3);
    let nb = g.neighborhood(0);
    assert_eq!(nb.offsets.len(), 6);
    let h = 1.0 / 8.0;
    for (j, w) in nb.offsets.iter().enumerate() {
        let m = nb.mirror[j];
        assert_eq!(mirror(m), j);
        for i in 0..3 {
            assert_eq!(w[i], -nb.offsets[m][i]);
        }
        let len = (w[0] * w[0] + w[1] * w[1]).sqrt();
        assert!((len - h).abs() < 1e-15 || (len - h * 2f64.sqrt()).abs() < 1e-15);
    }
    let g = grid(MacroMesh::unit_cube_6(), 3);
    assert_eq!(g.neighborhood(2).offsets.len(), 14);
    // translation invariance: offsets equal actual point differences at every interior node
    let g = grid(MacroMesh::regular_tetrahedron(), 3);
    let nb = g.neighborhood(0);
    for p in g.lattice().points() {
        if g.lattice().class_mask(p) != 15 {
            continue;
        }
        let x = g.point(0, p);
        for (j, d) in directions(3).iter().enumerate() {
            let y = g.point(0, [p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
            for i in 0..3 {
                assert!((y[i] - x[i] - nb.offsets[j][i]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn lattice_point_roundtrip() {
    for dim_mesh in [MacroMesh::unit_square(), MacroMesh::reference_tetrahedron()] {
        let g = grid(dim_mesh, 3);
        for (k, p) in g.lattice().points().enumerate() {
            assert_eq!(g.lattice().index_of(p), k);
            assert_eq!(g.lattice_point(k), p);
        }
    }
}

#[test]
fn builtin_meshes() {
    let m = MacroMesh::unit_square();
    assert_eq!((m.num_elements(), m.num_boundary_edges()), (2, 4));
    let m = MacroMesh::unit_cube_6();
    assert_eq!((m.num_elements(), m.num_boundary_faces()), (6, 12));
    let m = MacroMesh::unit_cube_12();
    assert_eq!(m.num_elements(), 12);
    assert_eq!((0..m.num_vertices()).filter(|&v| !m.is_boundary_vertex(v)).count(), 1);
    let m = MacroMesh::obtuse_square();
    assert_eq!(m.num_elements(), 14);
    let obtuse = (0..m.num_elements())
        .filter(|&t| hhg_core::stencil::detect_obtuse(2, &m.element_points(t)).unwrap())
        .count();
    assert_eq!(obtuse, 2);
}

#[test]
fn text_roundtrip() {
    let m = MacroMesh::unit_cube_12();
    let back = MacroMesh::parse(&m.to_text()).unwrap();
    assert_eq!(back.vertices(), m.vertices());
    for t in 0..m.num_elements() {
        assert_eq!(back.element(t), m.element(t));
    }
}

#[test]
fn parse_errors() {
    let bad_line = |text: &str| match MacroMesh::parse(text) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected parse error, got {other:?}"),
    };
    assert_eq!(bad_line("DIM 2\nVERTICES 3\n0 0\n1 x\n0 1\nELEMENTS 1\n0 1 2\n"), 4);
    assert_eq!(bad_line("DIM 4\n"), 1);
    assert_eq!(bad_line("DIM 2\nVERTICES 3\n0 0\n1 0\n0 1\nELEMENTS 1\n0 1 3\n"), 7);
    assert_eq!(bad_line("# header\nDIM 2\nVERTICES 1\n0 0 0\n"), 4);
    assert!(matches!(
        MacroMesh::parse("DIM 2\nVERTICES 3\n0 0\n1 0\n2 0\nELEMENTS 1\n0 1 2\n"),
        Err(Error::Degenerate(0))
    ));
    // a vertex hanging on the edge of the neighbour
    let hanging = "DIM 2\nVERTICES 5\n0 0\n1 0\n0 1\n1 1\n0.5 0.5\nELEMENTS 3\n0 1 2\n1 3 4\n4 3 2\n";
    assert!(matches!(MacroMesh::parse(hanging), Err(Error::NonConforming(_))));
}
