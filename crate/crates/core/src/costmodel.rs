//! Operation counts and memory traffic of one stencil assembly plus application.

use std::cell::Cell;
use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use crate::coefficients::Coefficient;
use crate::error::{Error, Result};
use crate::mesh::{MacroMesh, RefinedGrid};
use crate::operators::{Operator, Scalar, Variant};

thread_local! {
    static ADDS: Cell<u64> = const { Cell::new(0) };
    static MULS: Cell<u64> = const { Cell::new(0) };
}

/// `f64` that counts every addition, subtraction and multiplication on this thread.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl Add for Counted {
    type Output = Counted;
    fn add(self, o: Counted) -> Counted {
        ADDS.with(|c| c.set(c.get() + 1));
        Counted(self.0 + o.0)
    }
}

impl Sub for Counted {
    type Output = Counted;
    fn sub(self, o: Counted) -> Counted {
        ADDS.with(|c| c.set(c.get() + 1));
        Counted(self.0 - o.0)
    }
}

impl Mul for Counted {
    type Output = Counted;
    fn mul(self, o: Counted) -> Counted {
        MULS.with(|c| c.set(c.get() + 1));
        Counted(self.0 * o.0)
    }
}

impl Scalar for Counted {
    fn of(x: f64) -> Self {
        Counted(x)
    }
    fn get(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub add: u64,
    pub mul: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.add + self.mul
    }
}

impl fmt::Display for FlopCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} add / {} mult", self.add, self.mul)
    }
}

/// Counts the operations performed by `body` on this thread.
pub fn count<R>(body: impl FnOnce() -> R) -> (R, FlopCount) {
    ADDS.with(|c| c.set(0));
    MULS.with(|c| c.set(0));
    let r = body();
    (r, FlopCount { add: ADDS.with(Cell::get), mul: MULS.with(Cell::get) })
}

fn counted_kind(v: &Variant) -> Result<&Variant> {
    match v {
        Variant::Stored(b) => counted_kind(b).map(|_| v),
        Variant::Midpoint | Variant::ScalingMa2 => Err(Error::Unsupported(format!("no operation count for {}", v.name()))),
        _ => Ok(v),
    }
}

/// Per-node counts for an interior volume node, derived from the kernel's structure:
/// `nd` off-center directions, weights formed first and then applied as
/// `Σ_j w_j (u_j − u_i)`.
pub fn analytic_count(variant: &Variant, dim: usize) -> Result<FlopCount> {
    counted_kind(variant)?;
    let nd: u64 = if dim == 2 { 6 } else { 14 };
    let apply = FlopCount { add: 2 * nd - 1, mul: nd };
    let weights = match variant {
        Variant::Constant => return Ok(FlopCount { add: nd, mul: nd + 1 }),
        Variant::Stored(_) => FlopCount::default(),
        Variant::Scaling | Variant::Hybrid(_) => FlopCount { add: nd, mul: nd },
        // off-center entries from the element matrices with shared partial sums
        Variant::NodalFly => {
            if dim == 2 {
                FlopCount { add: 15, mul: 12 }
            } else {
                FlopCount { add: 98, mul: 72 }
            }
        }
        _ => unreachable!(),
    };
    Ok(FlopCount { add: weights.add + apply.add, mul: weights.mul + apply.mul })
}

/// Counts measured by running the operator's volume kernel once with [`Counted`].
pub fn measured_count(variant: &Variant, dim: usize) -> Result<FlopCount> {
    counted_kind(variant)?;
    let mesh = match dim {
        2 => MacroMesh::unit_square(),
        3 => MacroMesh::reference_tetrahedron(),
        _ => return Err(Error::Dimension { expected: 3, got: dim }),
    };
    let grid = Arc::new(RefinedGrid::new(Arc::new(mesh), 3));
    let coef = Coefficient::Custom(Arc::new(|x: &[f64; 3]| 2.0 + x[0] * x[1] + x[2]));
    let base = match variant {
        Variant::Stored(b) => (**b).clone(),
        v => v.clone(),
    };
    let mut op = Operator::new(grid.clone(), &coef, base)?;
    if matches!(variant, Variant::Stored(_)) {
        op = op.store()?;
    }
    let u: Vec<f64> = (0..grid.num_slots()).map(|s| (s as f64 * 0.618).fract()).collect();
    let (r, c) = count(|| op.volume_node_with::<Counted>(&u));
    r.ok_or_else(|| Error::Unsupported("grid has no volume node".into()))?;
    Ok(c)
}

/// Bytes loaded for the stencil weights of `n` volume nodes: (optimistic, pessimistic).
/// Element matrices or reference weights are loaded once; coefficient values either once
/// per node or once per stencil entry.
pub fn traffic(variant: &Variant, dim: usize, n: u64) -> Result<(u64, u64)> {
    let points: u64 = if dim == 2 { 7 } else { 15 };
    let (elements, local) = if dim == 2 { (6u64, 3u64) } else { (6, 4) };
    let once = match variant {
        Variant::Stored(_) => return Ok((8 * points * n, 8 * points * n)),
        Variant::NodalFly => 8 * elements * local * local,
        Variant::Scaling | Variant::Hybrid(_) | Variant::ScalingMa2 => 8 * (points - 1),
        Variant::Constant => return Ok((8 * points, 8 * points)),
        Variant::Midpoint => return Err(Error::Unsupported("no traffic model for midpoint".into())),
    };
    Ok((once + 8 * n, once + 8 * points * n))
}
