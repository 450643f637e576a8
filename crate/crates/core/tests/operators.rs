use std::sync::Arc;

use hhg_core::coefficients::{Coefficient, CoefficientField};
use hhg_core::mesh::{MacroMesh, RefinedGrid};
use hhg_core::operators::{Operator, PrimitiveSet, Variant};
use hhg_core::oracle::{assemble_global, dof_numbering, to_global, to_slots};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rough(x: &[f64; 3]) -> f64 {
    1.5 + (37.1 * x[0] + 91.7 * x[1] + 53.3 * x[2]).sin() * 0.9
}

fn variants() -> Vec<Variant> {
    vec![
        Variant::Constant,
        Variant::NodalFly,
        Variant::Scaling,
        Variant::ScalingMa2,
        Variant::Hybrid(PrimitiveSet::V),
        Variant::Hybrid(PrimitiveSet::V.union(PrimitiveSet::E)),
        Variant::Hybrid(PrimitiveSet::ALL),
        Variant::Midpoint,
        Variant::Stored(Box::new(Variant::Scaling)),
        Variant::Stored(Box::new(Variant::NodalFly)),
    ]
}

fn check_equivalence(mesh: MacroMesh, level: usize, coef: &Coefficient, variant: &Variant) -> f64 {
    let grid = Arc::new(RefinedGrid::new(Arc::new(mesh), level));
    let op = Operator::new(grid.clone(), coef, variant.clone()).unwrap();
    let a = assemble_global(&grid, op.field(), Some(coef), variant, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let ug: Vec<f64> = (0..grid.num_global()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let free = op.apply(&to_slots(&grid, &ug));
        let want = a.matvec(&ug);
        let got = to_global(&grid, &free);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in got.iter().zip(&want) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}

#[test]
fn matrix_free_matches_assembly_2d() {
    let coef = Coefficient::Custom(Arc::new(rough));
    for level in 0..=4 {
        for v in variants() {
            let e = check_equivalence(MacroMesh::unit_square(), level, &coef, &v);
            assert!(e < 1e-13, "{} level {level}: {e}", v.name());
        }
    }
    let sig = Coefficient::Sigmoid2d { m: 50.0, eta: 1000.0 };
    for level in 0..=3 {
        for v in variants() {
            let e = check_equivalence(MacroMesh::obtuse_square(), level, &sig, &v);
            assert!(e < 1e-13, "obtuse {} level {level}: {e}", v.name());
        }
    }
}

#[test]
fn matrix_free_matches_assembly_3d() {
    let coef = Coefficient::Custom(Arc::new(rough));
    for level in 0..=3 {
        for v in variants() {
            if v == Variant::ScalingMa2 {
                continue;
            }
            let e = check_equivalence(MacroMesh::unit_cube_6(), level, &coef, &v);
            assert!(e < 1e-13, "{} level {level}: {e}", v.name());
        }
    }
    for v in variants() {
        if v == Variant::ScalingMa2 {
            continue;
        }
        let e = check_equivalence(MacroMesh::unit_cube_12(), 2, &Coefficient::TensorPoly3d, &v);
        assert!(e < 1e-13, "tensor {}: {e}", v.name());
    }
}

#[test]
fn own_assembly_matches_oracle() {
    let coef = Coefficient::Custom(Arc::new(rough));
    for (mesh, level) in [(MacroMesh::unit_square(), 3), (MacroMesh::unit_cube_6(), 2)] {
        let grid = Arc::new(RefinedGrid::new(Arc::new(mesh), level));
        for v in [Variant::Scaling, Variant::NodalFly, Variant::Hybrid(PrimitiveSet::V)] {
            let op = Operator::new(grid.clone(), &coef, v.clone()).unwrap();
            let mine = op.assemble();
            let oracle = assemble_global(&grid, op.field(), None, &v, true).unwrap();
            assert_eq!(mine.n, oracle.n);
            for i in 0..mine.n {
                for (j, x) in oracle.row(i) {
                    assert!((mine.get(i, j) - x).abs() < 1e-13 * x.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn symmetric_variants_have_symmetric_zero_sum_matrices() {
    let coef = Coefficient::Custom(Arc::new(rough));
    let grid = Arc::new(RefinedGrid::new(Arc::new(MacroMesh::unit_cube_6()), 3));
    for v in [Variant::Scaling, Variant::NodalFly, Variant::Constant] {
        let field = CoefficientField::sample(&coef, &grid).unwrap();
        let m = assemble_global(&grid, &field, None, &v, true).unwrap();
        assert!(m.asymmetry() < 1e-13, "{}", v.name());
        // zero row sums hold before elimination: apply to the constant vector
        let op = Operator::new(grid.clone(), &coef, v.clone()).unwrap();
        let ones = vec![1.0; grid.num_slots()];
        let r = op.apply(&ones);
        for s in 0..grid.num_slots() {
            if !grid.is_dirichlet(s) {
                assert!(r[s].abs() < 1e-12, "{} slot {s}: {}", v.name(), r[s]);
            }
        }
    }
    let field = CoefficientField::sample(&coef, &grid).unwrap();
    let hyb = assemble_global(&grid, &field, None, &Variant::Hybrid(PrimitiveSet::ALL), true).unwrap();
    assert!(hyb.asymmetry() > 1e-6);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let coef = Coefficient::Cos3d { m: 3.0 };
    let grid = Arc::new(RefinedGrid::new(Arc::new(MacroMesh::unit_cube_6()), 4));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ug: Vec<f64> = (0..grid.num_global()).map(|_| rng.gen::<f64>()).collect();
    let u = to_slots(&grid, &ug);
    for v in [Variant::Scaling, Variant::NodalFly, Variant::Constant] {
        let mut op = Operator::new(grid.clone(), &coef, v).unwrap();
        op.set_parallel(true);
        let a = op.apply(&u);
        op.set_parallel(false);
        let b = op.apply(&u);
        assert_eq!(a, b);
    }
}

#[test]
fn stored_is_bit_identical_to_source() {
    let coef = Coefficient::Cos3d { m: 8.0 };
    let grid = Arc::new(RefinedGrid::new(Arc::new(MacroMesh::unit_cube_6()), 3));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = to_slots(&grid, &(0..grid.num_global()).map(|_| rng.gen::<f64>()).collect::<Vec<_>>());
    let op = Operator::new(grid.clone(), &coef, Variant::Scaling).unwrap();
    let st = op.store().unwrap();
    assert_eq!(op.apply(&u), st.apply(&u));
    assert_eq!(st.stored_bytes(), grid.num_slots() * 15 * 8);
}

#[test]
fn consistent_results_on_shared_nodes() {
    let coef = Coefficient::Custom(Arc::new(rough));
    let grid = Arc::new(RefinedGrid::new(Arc::new(MacroMesh::unit_cube_12()), 2));
    let op = Operator::new(grid.clone(), &coef, Variant::NodalFly).unwrap();
    let u: Vec<f64> = to_slots(&grid, &(0..grid.num_global()).map(|g| (g as f64 * 0.37).sin()).collect::<Vec<_>>());
    let r = op.apply(&u);
    for k in 0..grid.num_shared() {
        let (_, slots) = grid.shared_group(k);
        for &s in slots {
            assert_eq!(r[s as usize], r[slots[0] as usize]);
        }
    }
}

#[test]
fn gauss_seidel_fixed_point_and_smoothing() {
    let coef = Coefficient::Sin2d { m: 4.0 };
    let grid = Arc::new(RefinedGrid::new(Arc::new(MacroMesh::unit_square()), 4));
    let op = Operator::new(grid.clone(), &coef, Variant::Scaling).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (dof, _) = dof_numbering(&grid);
    let xg: Vec<f64> = (0..grid.num_global()).map(|g| if dof[g] == usize::MAX { 0.0 } else { rng.gen() }).collect();
    let x = to_slots(&grid, &xg);
    let f = op.apply(&x);
    let mut u = x.clone();
    op.gauss_seidel(&mut u, &f, 1, 1.0).unwrap();
    let d = u.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(d < 1e-13);

    let mut u = vec![0.0; grid.num_slots()];
    let r0: f64 = op.residual(&u, &f).iter().map(|v| v * v).sum::<f64>().sqrt();
    op.gauss_seidel(&mut u, &f, 5, 1.0).unwrap();
    let r1: f64 = op.residual(&u, &f).iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(r1 < 0.5 * r0);
}

#[test]
fn ma2_marks_only_obtuse_with_rough_coefficient() {
    let grid = Arc::new(RefinedGrid::new(Arc::new(MacroMesh::obtuse_square()), 1));
    let op = Operator::new(grid.clone(), &Coefficient::Sigmoid2d { m: 50.0, eta: 1000.0 }, Variant::ScalingMa2).unwrap();
    let info = op.ma2_info();
    assert_eq!(info.iter().filter(|i| i.obtuse).count(), 2);
    assert!(info.iter().any(|i| i.marked));
    assert!(info.iter().all(|i| !i.marked || i.obtuse));
    let flat = Operator::new(grid, &Coefficient::Constant(2.0), Variant::ScalingMa2).unwrap();
    assert!(flat.ma2_info().iter().all(|i| !i.marked));
}

#[test]
fn variant_parsing() {
    assert_eq!(Variant::parse("scaling").unwrap(), Variant::Scaling);
    assert_eq!(Variant::parse("hybrid(W_V+W_E)").unwrap(), Variant::Hybrid(PrimitiveSet::V.union(PrimitiveSet::E)));
    assert_eq!(Variant::parse("hybrid(W)").unwrap(), Variant::Hybrid(PrimitiveSet::ALL));
    assert_eq!(Variant::parse("stored(nodal)").unwrap(), Variant::Stored(Box::new(Variant::NodalFly)));
    assert!(Variant::parse("bogus").is_err());
    for v in variants() {
        assert_eq!(Variant::parse(&v.name()).unwrap(), v);
    }
}

mod properties {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn mesh(three: bool) -> Arc<MacroMesh> {
        Arc::new(if three { MacroMesh::unit_cube_6() } else { MacroMesh::obtuse_square() })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn scaling_equals_nodal_integration_for_constant_k(k in 0.1f64..10.0, level in 1usize..4, three: bool, seed: u64) {
            let grid = Arc::new(RefinedGrid::new(mesh(three), level));
            let coef = Coefficient::Constant(k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = to_slots(&grid, &(0..grid.num_global()).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            let a = Operator::new(grid.clone(), &coef, Variant::Scaling).unwrap().apply(&u);
            let b = Operator::new(grid.clone(), &coef, Variant::NodalFly).unwrap().apply(&u);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * k * 16.0);
            }
        }

        #[test]
        fn matrix_free_matches_assembly_for_affine_k(
            c in (0.5f64..3.0, 0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
            level in 0usize..4,
            three: bool,
        ) {
            let coef = Coefficient::Affine { c: [c.0, c.1, c.2, c.3] };
            for v in [Variant::Scaling, Variant::NodalFly, Variant::Hybrid(PrimitiveSet::V)] {
                let e = check_equivalence(if three { MacroMesh::unit_cube_6() } else { MacroMesh::obtuse_square() }, level, &coef, &v);
                prop_assert!(e < 1e-13, "{} level {}: {}", v.name(), level, e);
            }
        }
    }
}
