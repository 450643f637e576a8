//! Coefficient catalog, nodal sampling, the k_min field and the M-term tensor splitting.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::jet::Real;
use crate::mesh::{directions, Point, RefinedGrid};
use crate::stencil::Sym3;

pub type Tensor<T> = [[T; 3]; 3];

/// Coefficient functions available by name.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// `2 + sin(mπx) sin(mπy)`
    Sin2d { m: f64 },
    /// `η / (1 + exp(-m (y - x - 0.2))) + 1`
    Sigmoid2d { m: f64, eta: f64 },
    /// `cos(mπxyz) + 2`
    Cos3d { m: f64 },
    /// `c0 + c1 x + c2 y + c3 z`
    Affine { c: [f64; 4] },
    /// The full polynomial tensor with non-positive off-diagonals.
    TensorPoly3d,
    /// Half-cylinder mantle blending tensor times `a = 1 + z`, in reference coordinates.
    CylinderBlend(CylinderMap),
    /// User-supplied scalar; no derivatives available.
    Custom(Arc<dyn Fn(&Point) -> f64 + Send + Sync>),
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "const({c})"),
            Coefficient::Sin2d { m } => write!(f, "sin2d({m})"),
            Coefficient::Sigmoid2d { m, eta } => write!(f, "sigmoid2d({m},{eta})"),
            Coefficient::Cos3d { m } => write!(f, "cos3d({m})"),
            Coefficient::Affine { c } => write!(f, "affine({},{},{},{})", c[0], c[1], c[2], c[3]),
            Coefficient::TensorPoly3d => write!(f, "tensor3d_poly"),
            Coefficient::CylinderBlend(_) => write!(f, "cylinder_blend"),
            Coefficient::Custom(_) => write!(f, "custom"),
        }
    }
}

impl Coefficient {
    /// Parses catalog names such as `sin2d(2)`, `sigmoid2d(50,100)`, `const(1)`.
    pub fn parse(spec: &str) -> Result<Self> {
        let s = spec.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            _ => (s, ""),
        };
        let vals: Vec<f64> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad argument `{a}` in `{spec}`"))))
                .collect::<Result<_>>()?
        };
        let need = |n: usize| -> Result<()> {
            if vals.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("`{name}` takes {n} argument(s)")))
            }
        };
        Ok(match name {
            "const" => {
                need(1)?;
                Coefficient::Constant(vals[0])
            }
            "sin2d" => {
                need(1)?;
                Coefficient::Sin2d { m: vals[0] }
            }
            "sigmoid2d" => {
                need(2)?;
                Coefficient::Sigmoid2d { m: vals[0], eta: vals[1] }
            }
            "cos3d" => {
                need(1)?;
                Coefficient::Cos3d { m: vals[0] }
            }
            "affine" => {
                need(4)?;
                Coefficient::Affine { c: [vals[0], vals[1], vals[2], vals[3]] }
            }
            "tensor3d_poly" => Coefficient::TensorPoly3d,
            "cylinder_blend" => Coefficient::CylinderBlend(CylinderMap::default()),
            _ => return Err(Error::Config(format!("unknown coefficient `{spec}`"))),
        })
    }

    pub fn is_tensor(&self) -> bool {
        matches!(self, Coefficient::TensorPoly3d | Coefficient::CylinderBlend(_))
    }

    /// Scalar value, for scalar coefficients.
    pub fn scalar<T: Real>(&self, x: [T; 3]) -> Option<T> {
        let pi = T::cst(std::f64::consts::PI);
        let [x, y, z] = x;
        Some(match self {
            Coefficient::Constant(c) => T::cst(*c),
            Coefficient::Sin2d { m } => T::cst(2.0) + (T::cst(*m) * pi * x).sin() * (T::cst(*m) * pi * y).sin(),
            Coefficient::Sigmoid2d { m, eta } => {
                T::cst(*eta) / (T::cst(1.0) + (-(T::cst(*m) * (y - x - T::cst(0.2)))).exp()) + T::cst(1.0)
            }
            Coefficient::Cos3d { m } => (T::cst(*m) * pi * x * y * z).cos() + T::cst(2.0),
            Coefficient::Affine { c } => T::cst(c[0]) + T::cst(c[1]) * x + T::cst(c[2]) * y + T::cst(c[3]) * z,
            _ => return None,
        })
    }

    /// The full tensor `K` (scalars give `k I`).
    pub fn tensor<T: Real>(&self, x: [T; 3]) -> Option<Tensor<T>> {
        if let Some(k) = self.scalar(x) {
            let o = T::cst(0.0);
            return Some([[k, o, o], [o, k, o], [o, o, k]]);
        }
        let one = T::cst(1.0);
        let [x, y, z] = x;
        match self {
            Coefficient::TensorPoly3d => {
                let (x2, y2, z2) = (x * x, y * y, z * z);
                let c = T::cst;
                Some([
                    [x2 + c(2.0) * y2 + c(3.0) * z2 + one, -y2, -z2],
                    [-y2, c(2.0) * x2 + c(3.0) * y2 + z2 + one, -x2],
                    [-z2, -x2, c(3.0) * x2 + y2 + c(2.0) * z2 + one],
                ])
            }
            Coefficient::CylinderBlend(map) => Some(map.reference_tensor([x, y, z])),
            _ => None,
        }
    }

    /// Plain `f64` evaluation of the tensor, including custom scalars.
    pub fn tensor_f64(&self, x: &Point) -> Tensor<f64> {
        match self {
            Coefficient::Custom(f) => {
                let k = f(x);
                [[k, 0.0, 0.0], [0.0, k, 0.0], [0.0, 0.0, k]]
            }
            _ => self.tensor(*x).expect("catalog coefficient"),
        }
    }

    pub fn scalar_f64(&self, x: &Point) -> Option<f64> {
        match self {
            Coefficient::Custom(f) => Some(f(x)),
            _ => self.scalar(*x),
        }
    }
}

/// The half-cylinder mantle map `Φ(x,y,z) = (√(x²+y²) + w(z), acos(x/√(x²+y²)), z)` with
/// `w(z) = amp sin(zπ/z1)`, and the material factor `a = 1 + z`.
#[derive(Clone, Copy, Debug)]
pub struct CylinderMap {
    pub r1: f64,
    pub r2: f64,
    pub z1: f64,
    pub amp: f64,
}

impl Default for CylinderMap {
    fn default() -> Self {
        CylinderMap { r1: 0.8, r2: 1.0, z1: 4.0, amp: 0.2 }
    }
}

impl CylinderMap {
    fn w<T: Real>(&self, z: T) -> (T, T) {
        let c = T::cst(std::f64::consts::PI / self.z1);
        let a = T::cst(self.amp);
        (a * (c * z).sin(), a * c * (c * z).cos())
    }

    /// Physical → reference coordinates.
    pub fn phi(&self, p: &Point) -> Point {
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        [r + self.w(p[2]).0, (p[0] / r).acos(), p[2]]
    }

    /// Reference → physical coordinates.
    pub fn phi_inv(&self, q: &Point) -> Point {
        let r = q[0] - self.w(q[2]).0;
        [r * q[1].cos(), r * q[1].sin(), q[2]]
    }

    /// `DΦ` at a physical point (y > 0).
    pub fn jacobian(&self, p: &Point) -> [[f64; 3]; 3] {
        let r2 = p[0] * p[0] + p[1] * p[1];
        let r = r2.sqrt();
        let wp = self.w(p[2]).1;
        [[p[0] / r, p[1] / r, wp], [-p[1] / r2, p[0] / r2, 0.0], [0.0, 0.0, 1.0]]
    }

    /// `a K` in reference coordinates, with `r = x̂ − w(ẑ)`.
    pub fn reference_tensor<T: Real>(&self, q: [T; 3]) -> Tensor<T> {
        let (w, wp) = self.w(q[2]);
        let r = q[0] - w;
        let s = (T::cst(1.0) + q[2]) * r;
        let o = T::cst(0.0);
        [
            [s * (wp * wp + T::cst(1.0)), o, s * wp],
            [o, s / (r * r), o],
            [s * wp, o, s],
        ]
    }
}

/// `K = (DΦ)(DΦ)ᵀ / |det DΦ|`.
pub fn blending_tensor(jac: &[[f64; 3]; 3]) -> Result<Tensor<f64>> {
    let j = jac;
    let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
    if det.abs() < 1e-14 {
        return Err(Error::SingularJacobian([det, 0.0, 0.0]));
    }
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                k[a][b] += j[a][c] * j[b][c];
            }
            k[a][b] /= det.abs();
        }
    }
    Ok(k)
}

/// Metrics `G_m` of the M-term splitting `∇v·K∇w = Σ_m k_m ∇vᵀ G_m ∇w`.
pub fn component_metrics(dim: usize) -> Vec<Sym3> {
    let z = [[0.0; 3]; 3];
    let outer = |v: [f64; 3]| -> Sym3 { std::array::from_fn(|i| std::array::from_fn(|j| v[i] * v[j])) };
    let id = crate::stencil::IDENTITY3;
    if dim == 2 {
        let mut i2 = z;
        i2[0][0] = 1.0;
        i2[1][1] = 1.0;
        vec![i2, outer([1.0, 1.0, 0.0]), outer([0.0, 1.0, 0.0])]
    } else {
        vec![
            id,
            outer([1.0, 1.0, 0.0]),
            outer([1.0, 0.0, 1.0]),
            outer([0.0, 1.0, 1.0]),
            outer([0.0, 1.0, 0.0]),
            outer([0.0, 0.0, 1.0]),
        ]
    }
}

/// 2D: `k1 = K11 − K12`, `k2 = K12`, `k3 = K22 − K11`.
pub fn tensor_decompose_2d(k: &Tensor<f64>) -> [f64; 3] {
    [k[0][0] - k[0][1], k[0][1], k[1][1] - k[0][0]]
}

/// 3D: the diagonal remainders `d_p = K_pp − Σ_{q≠p} K_pq` carried as `d1` on ∇ plus
/// `d2 − d1`, `d3 − d1` on `∂_y`, `∂_z`, and each off-diagonal on `∂_p + ∂_q`.
pub fn tensor_decompose_3d(k: &Tensor<f64>) -> [f64; 6] {
    let d1 = k[0][0] - k[0][1] - k[0][2];
    let d2 = k[1][1] - k[0][1] - k[1][2];
    let d3 = k[2][2] - k[0][2] - k[1][2];
    [d1, k[0][1], k[0][2], k[1][2], d2 - d1, d3 - d1]
}

#[derive(Clone, Debug)]
pub struct Component {
    pub metric: Sym3,
    /// One value per slot of the grid (`k|_T(x_i)` for the slot's macro `T`).
    pub values: Vec<f64>,
}

/// Nodal coefficient data of one grid level.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    pub components: Vec<Component>,
    pub scalar: bool,
}

impl CoefficientField {
    /// Samples a coefficient at every slot. Scalars must be positive, tensors SPD.
    pub fn sample(coef: &Coefficient, grid: &RefinedGrid) -> Result<Self> {
        Self::sample_with(grid, coef.is_tensor(), |_, x| coef.tensor_f64(x))
    }

    /// Samples `k(t, x)` per macro element `t`, allowing jumps across macro boundaries.
    pub fn sample_with<F: Fn(usize, &Point) -> Tensor<f64>>(grid: &RefinedGrid, tensor: bool, f: F) -> Result<Self> {
        let dim = grid.dim();
        let metrics = component_metrics(dim);
        let ns = grid.num_slots();
        let per = grid.slots_per_macro();
        let mut vals = vec![vec![0.0; ns]; if tensor { metrics.len() } else { 1 }];
        for s in 0..ns {
            let t = s / per;
            let x = grid.slot_point(s);
            let k = f(t, &x);
            if !spd(&k, dim) {
                let p = grid.lattice_point(s % per);
                return Err(Error::NonPositive { value: k[0][0], macro_id: t, a: p[0], b: p[1], c: p[2] });
            }
            if tensor {
                if dim == 2 {
                    for (m, v) in tensor_decompose_2d(&k).iter().enumerate() {
                        vals[m][s] = *v;
                    }
                } else {
                    for (m, v) in tensor_decompose_3d(&k).iter().enumerate() {
                        vals[m][s] = *v;
                    }
                }
            } else {
                vals[0][s] = k[0][0];
            }
        }
        let components = if tensor {
            metrics
                .into_iter()
                .zip(vals)
                .filter(|(_, v)| v.iter().any(|&x| x != 0.0))
                .map(|(metric, values)| Component { metric, values })
                .collect()
        } else {
            vec![Component { metric: crate::stencil::IDENTITY3, values: vals.pop().unwrap() }]
        };
        Ok(CoefficientField { components, scalar: !tensor })
    }

    /// Constant one, the reference stencil's coefficient.
    pub fn ones(grid: &RefinedGrid) -> Self {
        CoefficientField {
            components: vec![Component { metric: crate::stencil::IDENTITY3, values: vec![1.0; grid.num_slots()] }],
            scalar: true,
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Scalar values; panics for tensor fields.
    pub fn values(&self) -> &[f64] {
        assert!(self.scalar, "scalar field expected");
        &self.components[0].values
    }
}

fn spd(k: &Tensor<f64>, dim: usize) -> bool {
    // Cholesky on the leading dim×dim block
    let mut l = [[0.0; 3]; 3];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = k[i][j];
            for p in 0..j {
                s -= l[i][p] * l[j][p];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}

/// `k_min(x_i) = min{k(x_j) | x_j ∈ N_T(x_i)}`, the neighbourhood including `x_i` and
/// restricted to the closure of the slot's macro element.
pub fn kmin_field(grid: &RefinedGrid, values: &[f64]) -> Vec<f64> {
    let lat = grid.lattice();
    let per = grid.slots_per_macro();
    let dirs = directions(grid.dim());
    let mut out = vec![0.0; values.len()];
    for t in 0..grid.num_macros() {
        let base = t * per;
        for (k, p) in lat.points().enumerate() {
            let mut m = values[base + k];
            for d in dirs {
                let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                if lat.contains(q) {
                    m = m.min(values[base + lat.index_of(q)]);
                }
            }
            out[base + k] = m;
        }
    }
    out
}
