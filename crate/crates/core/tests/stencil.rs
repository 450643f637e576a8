use std::sync::Arc;

use approx::assert_relative_eq;
use hhg_core::mesh::{directions, MacroMesh, RefinedGrid};
use hhg_core::stencil::{
    classify_edge_types, cse_plan, detect_obtuse, element_matrix, element_stiffness, lambda_min, reference_stencil, star,
    EdgeColor, StencilTable,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(mesh: MacroMesh, level: usize) -> RefinedGrid {
    RefinedGrid::new(Arc::new(mesh), level)
}

fn dir(d: [i32; 3]) -> usize {
    hhg_core::mesh::direction_index(3, d).unwrap()
}

#[test]
fn stiffness_matches_closed_form() {
    // reference triangle: [[1,-1/2,-1/2],[-1/2,1/2,0],[-1/2,0,1/2]]
    let a = element_stiffness(2, &[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    let want = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
    for i in 0..3 {
        for j in 0..3 {
            assert_relative_eq!(a[i][j], want[i][j], epsilon = 1e-15);
        }
    }
    // reference tetrahedron: diagonal (1/2, 1/6, 1/6, 1/6), a_0k = -1/6
    let a = element_stiffness(3, &[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    assert_relative_eq!(a[0][0], 0.5, epsilon = 1e-15);
    for k in 1..4 {
        assert_relative_eq!(a[k][k], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(a[0][k], -1.0 / 6.0, epsilon = 1e-15);
        for l in 1..4 {
            if l != k {
                assert_relative_eq!(a[k][l], 0.0, epsilon = 1e-15);
            }
        }
    }
}

#[test]
fn stiffness_symmetric_zero_row_sum_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let p: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let m = [[2.0, 0.3, -0.1], [0.3, 1.0, 0.2], [-0.1, 0.2, 1.5]];
        let a = element_matrix(3, &p, &m).unwrap();
        for i in 0..4 {
            let s: f64 = a[i].iter().sum();
            assert!(s.abs() <= 1e-12 * a[i][i].abs());
            for j in 0..4 {
                assert!((a[i][j] - a[j][i]).abs() <= 1e-12 * a[i][i].abs().max(a[j][j].abs()));
            }
        }
    }
}

#[test]
fn reference_tetrahedron_stencil() {
    let g = grid(MacroMesh::reference_tetrahedron(), 2);
    let s = reference_stencil(&g, 0).unwrap();
    let sh = s.interior();
    assert_relative_eq!(s.center(), 5.0 / 3.0, epsilon = 1e-14);
    // lattice steps a and c run along the coordinate axes
    for d in [[1, 0, 0], [0, 0, 1]] {
        assert_relative_eq!(sh[dir(d)], -1.0 / 3.0, epsilon = 1e-14);
    }
    assert_relative_eq!(sh[dir([1, -1, 1])], 1.0 / 12.0, epsilon = 1e-14);
    assert_relative_eq!(sh[dir([0, 1, 0])], -1.0 / 6.0, epsilon = 1e-14);
    let types = classify_edge_types(&s);
    assert_eq!(types[dir([0, 1, 0])].color, EdgeColor::Green);
    assert_eq!(types[dir([1, 0, -1])].color, EdgeColor::Blue);
    assert_eq!(types[dir([1, 0, -1])].sign, 1);
    assert_eq!(types.iter().filter(|t| t.sign > 0).count(), 4);
    assert_eq!(types[dir([1, -1, 1])].color, EdgeColor::Gray);
    assert_eq!(types[dir([1, -1, 1])].sign, 1);
    assert_eq!(types[dir([1, -1, 1])].elements, 4);
    let sum: f64 = sh.iter().sum::<f64>() + s.center();
    assert!(sum.abs() < 1e-14);
    assert!(!detect_obtuse(3, &g.mesh().element_points(0)).unwrap());
}

#[test]
fn regular_tetrahedron_stencil() {
    let g = grid(MacroMesh::regular_tetrahedron(), 2);
    let s = reference_stencil(&g, 0).unwrap();
    assert!((s.center() - 2.4).abs() < 0.05, "{}", s.center());
    let types = classify_edge_types(&s);
    for (j, t) in types.iter().enumerate() {
        let v = s.interior()[j];
        match t.color {
            EdgeColor::Gray => assert!((v - 0.12).abs() < 0.005, "gray {v}"),
            EdgeColor::Blue | EdgeColor::Green => assert!((v + 0.059).abs() < 0.001, "blue/green {v}"),
            EdgeColor::Red => assert!((v + 0.29).abs() < 0.005, "red {v}"),
            EdgeColor::Plain => unreachable!(),
        }
    }
    assert_eq!(types.iter().filter(|t| t.color == EdgeColor::Red).count(), 8);
    assert!(detect_obtuse(3, &g.mesh().element_points(0)).unwrap() == false);
}

#[test]
fn partial_stencils_sum_over_adjacent_macros() {
    // summing the per-macro partial stencils of a shared node reproduces a full interior
    // stencil when all macros carry the same lattice orientation (Kuhn cube)
    let g = grid(MacroMesh::unit_cube_6(), 3);
    let center = 0.5;
    let mut c = 0.0;
    let mut count = 0;
    for s in 0..g.num_slots() {
        let p = g.slot_point(s);
        if p == [center, center, center] {
            let t = s / g.slots_per_macro();
            let table = reference_stencil(&g, t).unwrap();
            c += table.classes[g.class_mask(s)][14];
            count += 1;
        }
    }
    assert_eq!(count, 6);
    // 7-point Laplacian scaled by h: center 6h
    assert_relative_eq!(c, 6.0 / 8.0, epsilon = 1e-14);
}

#[test]
fn two_dimensional_stencil() {
    let g = grid(MacroMesh::unit_square(), 2);
    let s = reference_stencil(&g, 0).unwrap();
    assert_relative_eq!(s.center(), 4.0, epsilon = 1e-14);
    let sh = s.interior();
    assert_eq!(sh.len(), 6);
    // element 0 spans (1,0) and (1,1): lattice direction b is the diagonal
    for j in [0, 1, 4, 5] {
        assert_relative_eq!(sh[j], -1.0, epsilon = 1e-14);
    }
    assert!(sh[2].abs() < 1e-15 && sh[3].abs() < 1e-15);
    // 2D stencils do not depend on h
    let s3 = reference_stencil(&grid(MacroMesh::unit_square(), 4), 0).unwrap();
    assert_relative_eq!(s3.center(), 4.0, epsilon = 1e-14);
}

#[test]
fn obtuse_triangle_has_positive_entry() {
    let m = MacroMesh::new(2, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.1, 0.0]], vec![vec![0, 1, 2]]).unwrap();
    let g = grid(m, 2);
    let s = reference_stencil(&g, 0).unwrap();
    let types = classify_edge_types(&s);
    assert_eq!(types.iter().filter(|t| t.sign > 0).count(), 2);
    assert!(detect_obtuse(2, &g.mesh().element_points(0)).unwrap());
}

#[test]
fn lambda_min_values() {
    let s3 = 3f64.sqrt();
    let eq = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, s3 / 2.0, 0.0]];
    assert_relative_eq!(lambda_min(&eq).unwrap(), 1.0 / (2.0 * s3), epsilon = 1e-14);
    // scale invariance
    let big: Vec<[f64; 3]> = eq.iter().map(|p| [p[0] * 7.0, p[1] * 7.0, 0.0]).collect();
    assert_relative_eq!(lambda_min(&big).unwrap(), 1.0 / (2.0 * s3), epsilon = 1e-14);
    // right isosceles: dense oracle by scanning the Rayleigh quotient on the complement
    let rt = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let a = element_stiffness(2, &rt).unwrap();
    let mut best = f64::INFINITY;
    for k in 0..200000 {
        let th = k as f64 / 200000.0 * std::f64::consts::PI;
        let (c, s) = (th.cos(), th.sin());
        // orthonormal basis of the complement of constants
        let x = [
            c / 2f64.sqrt() + s / 6f64.sqrt(),
            -c / 2f64.sqrt() + s / 6f64.sqrt(),
            -2.0 * s / 6f64.sqrt(),
        ];
        let mut num = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                num += x[i] * a[i][j] * x[j];
            }
        }
        best = f64::min(best, num / 3.0);
    }
    assert_relative_eq!(lambda_min(&rt).unwrap(), best, epsilon = 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let p: Vec<[f64; 3]> = (0..3).map(|_| [rng.gen(), rng.gen(), 0.0]).collect();
        if let Ok(l) = lambda_min(&p) {
            assert!(l > 0.0);
        }
    }
}

#[test]
fn star_structure() {
    let s3 = star(3);
    assert_eq!(s3.elems.len(), 24);
    let counts: Vec<usize> = s3.by_dir.iter().map(|v| v.len()).collect();
    assert_eq!(counts.iter().filter(|&&c| c == 4).count(), 6);
    assert_eq!(counts.iter().filter(|&&c| c == 6).count(), 8);
    assert_eq!(star(2).elems.len(), 6);
    // the class-restricted stars of the four vertex classes of a tet partition nothing
    // but together with all other classes count each element according to its position
    assert_eq!(s3.inside[15].iter().filter(|&&b| b).count(), 24);
    for mask in [1usize, 2, 4, 8] {
        assert!(s3.inside[mask].iter().filter(|&&b| b).count() >= 1);
    }
}

#[test]
fn cse_plan_counts() {
    let p = cse_plan(3);
    assert_eq!(p.additions(), 40);
    let p2 = cse_plan(2);
    assert_eq!(p2.additions(), 9);
    // every element's plan order covers exactly its non-center vertices
    for (dim, plan) in [(3, p), (2, p2)] {
        let st = star(dim);
        for (e, el) in st.elems.iter().enumerate() {
            let mut got = plan.order(e);
            got.sort();
            let mut want: Vec<usize> = (0..=dim).filter(|&k| k != el.pos).map(|k| el.dirs[k]).collect();
            want.sort();
            assert_eq!(got, want);
        }
    }
    assert_eq!(directions(3).len(), 14);
}

#[test]
fn class_stencils_reuse_across_nodes() {
    // the partial stencil of a face class equals the element-loop row restricted to the macro
    let g = grid(MacroMesh::regular_tetrahedron(), 3);
    let table: StencilTable = reference_stencil(&g, 0).unwrap();
    let lat = g.lattice();
    let els = lat.elements();
    for p in lat.points() {
        let mask = lat.class_mask(p);
        let mut center = 0.0;
        for (v, s) in &els {
            for k in 0..4 {
                if v[k] == p {
                    center += table.shape_mats[*s][k][k];
                }
            }
        }
        assert_relative_eq!(table.classes[mask][14], center, epsilon = 1e-13);
    }
}
