//! P1 finite-element assembly on triangle meshes.
//!
//! Fields are piecewise-linear ("P1") functions identified with their nodal
//! value vectors. For the weighted Neumann operator `−∇·(f ∇·)` the module
//! assembles
//!
//! ```text
//! M_ab = ∫ η_a η_b dx                 (mass matrix)
//! K_ab = ∫ f ∇η_a · ∇η_b dx          (stiffness matrix, f > 0 nodal P1)
//! ```
//!
//! where `η_a` are the nodal hat functions. On each triangle the hat gradients
//! are constant, so the stiffness integrand reduces to `(∇η_a·∇η_b) ∫_T f`;
//! `∫_T f` is integrated by the three-point mid-edge rule, which is exact for
//! P1 `f` and equals `area·(f_1+f_2+f_3)/3`. No boundary terms appear anywhere:
//! the natural (Neumann) condition is built into the weak form.
//!
//! The same element geometry powers [`gradient_coupling`], the trilinear form
//! `(u, v, h) ↦ Σ_T (∇u·∇v)|_T ∫_T h` that appears when differentiating
//! spectral quantities with respect to the conductivity: it is exactly
//! `uᵀ K(h) v` with `h` in place of the conductivity, without requiring
//! `h > 0`.
//!
//! Matrices are stored in a sorted upper-triangle coordinate format
//! ([`SparseSymmetric`]); assembly is deterministic (entries are accumulated
//! in triangle order), so repeated runs produce bitwise-identical matrices.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::mesh::Mesh;
use crate::{Error, Result};

/// A P1 field: one value per mesh node.
///
/// Thin wrapper around the nodal value vector; constructors check finiteness,
/// and operations consuming a field check its length against the mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOnMesh(pub DVector<f64>);

impl FieldOnMesh {
    /// Wraps a nodal vector, rejecting non-finite entries.
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite field value at node {i}"
            )));
        }
        Ok(FieldOnMesh(values))
    }

    /// The constant field `c` on a mesh with `n` nodes.
    pub fn constant(n: usize, c: f64) -> Self {
        FieldOnMesh(DVector::from_element(n, c))
    }

    /// Samples a closure at every node.
    pub fn from_fn(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Self {
        FieldOnMesh(DVector::from_iterator(
            mesh.n_nodes(),
            mesh.nodes.iter().map(|&p| f(p)),
        ))
    }

    /// Number of nodal values.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// True when the field carries no values (never for a valid mesh field).
    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }
}

/// Sparse symmetric matrix stored as its upper triangle in coordinate form.
///
/// Entries are sorted lexicographically by `(row, col)` with `row ≤ col`,
/// duplicates coalesced and exact zeros dropped. The format is small, cheap to
/// assemble deterministically, and sufficient for the mat-vecs and envelope
/// factorization used by the eigensolver.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    dim: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SparseSymmetric {
    /// Builds from (row, col, value) triplets addressing either triangle;
    /// symmetric duplicates are folded into the upper triangle and summed in
    /// input order.
    pub fn from_triplets(dim: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut entries: Vec<(u32, u32, f64)> = Vec::new();
        for (r, c, v) in triplets {
            if r >= dim || c >= dim {
                return Err(Error::InvalidParameter(format!(
                    "triplet index ({r}, {c}) out of range for dim {dim}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite matrix entry at ({r}, {c})"
                )));
            }
            let (lo, hi) = (r.min(c) as u32, r.max(c) as u32);
            entries.push((lo, hi, v));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c)); // stable: duplicates stay in input order
        let mut merged: Vec<(u32, u32, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|&(_, _, v)| v != 0.0);
        Ok(SparseSymmetric {
            dim,
            entries: merged,
        })
    }

    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored (upper-triangle) entry count.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Iterates stored entries `(row, col, value)` with `row ≤ col`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|&(r, c, v)| (r as usize, c as usize, v))
    }

    /// Symmetric matrix–vector product.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim, "matvec dimension mismatch");
        let mut y = DVector::zeros(self.dim);
        for &(r, c, v) in &self.entries {
            let (r, c) = (r as usize, c as usize);
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
        y
    }

    /// Quadratic form `xᵀ A x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for &(r, c, v) in &self.entries {
            let (r, c) = (r as usize, c as usize);
            s += if r == c {
                v * x[r] * x[r]
            } else {
                2.0 * v * x[r] * x[c]
            };
        }
        s
    }

    /// Densifies (both triangles filled).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r as usize, c as usize)] = v;
            m[(c as usize, r as usize)] = v;
        }
        m
    }

    /// Diagonal as a vector (zeros included).
    pub fn diag(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim);
        for &(r, c, v) in &self.entries {
            if r == c {
                d[r as usize] = v;
            }
        }
        d
    }

    /// Linear combination `self + alpha · other` (dimensions must match).
    pub fn add_scaled(&self, other: &SparseSymmetric, alpha: f64) -> Result<SparseSymmetric> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
                context: "add_scaled operand",
            });
        }
        let trips = self
            .entries()
            .map(|(r, c, v)| (r, c, v))
            .chain(other.entries().map(|(r, c, v)| (r, c, alpha * v)));
        SparseSymmetric::from_triplets(self.dim, trips)
    }

    /// Writes the matrix in Matrix Market coordinate format (symmetric real,
    /// 1-based, lower triangle as the convention requires).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.dim, self.dim, self.entries.len())?;
        for &(r, c, v) in &self.entries {
            // stored upper (r ≤ c) → emitted lower (c+1, r+1)
            writeln!(w, "{} {} {:.17e}", c + 1, r + 1, v)?;
        }
        Ok(())
    }
}

/// Constant gradients of the three hat functions on a triangle, plus its area.
///
/// For vertices `a, b, c` (counterclockwise): `∇η_a = (b_y − c_y, c_x − b_x) / 2A`
/// and cyclic permutations.
pub(crate) fn p1_gradients(v: [[f64; 2]; 3]) -> ([[f64; 2]; 3], f64) {
    let [a, b, c] = v;
    let two_a = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let grads = [
        [(b[1] - c[1]) / two_a, (c[0] - b[0]) / two_a],
        [(c[1] - a[1]) / two_a, (a[0] - c[0]) / two_a],
        [(a[1] - b[1]) / two_a, (b[0] - a[0]) / two_a],
    ];
    (grads, 0.5 * two_a)
}

/// Assembles the P1 mass matrix `M_ab = ∫ η_a η_b`.
///
/// Element contribution: `(area/12) · [[2,1,1],[1,2,1],[1,1,2]]` (exact for
/// straight triangles). `M` is symmetric positive definite with row sums
/// `area/3` per element, so `1ᵀ M 1` equals the meshed area.
pub fn assemble_mass(mesh: &Mesh) -> SparseSymmetric {
    let mut trips = Vec::with_capacity(6 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.triangle_area(t);
        let w = area / 12.0;
        for i in 0..3 {
            for j in i..3 {
                let v = if i == j { 2.0 * w } else { w };
                trips.push((tri[i], tri[j], v));
            }
        }
    }
    SparseSymmetric::from_triplets(mesh.n_nodes(), trips).expect("mass assembly is in range")
}

/// Assembles the conductivity-weighted stiffness matrix
/// `K_ab = ∫ f ∇η_a · ∇η_b` for nodal P1 `f > 0`.
///
/// Per element this is `(∇η_a·∇η_b) · area · (f_1+f_2+f_3)/3`, the mid-edge
/// quadrature being exact for P1 `f`. The result is symmetric positive
/// semidefinite with kernel spanned by constants (`K·1 ≈ 0` to rounding).
///
/// # Errors
///
/// Rejects `f` of the wrong length and `f ≤ 0` at any node.
pub fn assemble_stiffness(mesh: &Mesh, f: &FieldOnMesh) -> Result<SparseSymmetric> {
    if f.len() != mesh.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_nodes(),
            got: f.len(),
            context: "conductivity field",
        });
    }
    if let Some(node) = f.0.iter().position(|&v| v <= 0.0) {
        return Err(Error::ConductivityNotPositive {
            node,
            value: f.0[node],
        });
    }
    Ok(assemble_weighted_form(mesh, &f.0))
}

/// Stiffness-pattern assembly without the positivity requirement on the
/// weight; used both by [`assemble_stiffness`] and for derivative couplings
/// where the weight is a signed perturbation direction.
fn assemble_weighted_form(mesh: &Mesh, w: &DVector<f64>) -> SparseSymmetric {
    let mut trips = Vec::with_capacity(6 * mesh.triangles.len());
    for tri in mesh.triangles.iter() {
        let (grads, area) = p1_gradients([
            mesh.nodes[tri[0]],
            mesh.nodes[tri[1]],
            mesh.nodes[tri[2]],
        ]);
        let wbar = (w[tri[0]] + w[tri[1]] + w[tri[2]]) / 3.0;
        let scale = area * wbar;
        for i in 0..3 {
            for j in i..3 {
                let gij = grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1];
                trips.push((tri[i], tri[j], scale * gij));
            }
        }
    }
    SparseSymmetric::from_triplets(mesh.n_nodes(), trips).expect("stiffness assembly is in range")
}

/// Evaluates a P1 field at an arbitrary point by barycentric interpolation.
///
/// Exact at nodes and for globally linear fields; fails if `x` lies outside
/// the meshed region (see [`Mesh::locate_point`] for the tolerance).
pub fn evaluate_field(mesh: &Mesh, field: &FieldOnMesh, x: [f64; 2]) -> Result<f64> {
    if field.len() != mesh.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_nodes(),
            got: field.len(),
            context: "field to evaluate",
        });
    }
    let loc = mesh.locate_point(x)?;
    let tri = mesh.triangles[loc.triangle];
    Ok(loc.weights[0] * field.0[tri[0]]
        + loc.weights[1] * field.0[tri[1]]
        + loc.weights[2] * field.0[tri[2]])
}

/// The conductivity-perturbation coupling form
///
/// ```text
/// B(u, v; h) = Σ_T (∇u · ∇v)|_T ∫_T h = uᵀ K(h) v,
/// ```
///
/// i.e. the derivative of `uᵀ K(f) v` in the conductivity direction `h`
/// (assembly is linear in the weight). `h` may change sign. Bilinear in
/// `(u, v)`, symmetric, and zero whenever `u` or `v` is constant.
pub fn gradient_coupling(
    mesh: &Mesh,
    u: &FieldOnMesh,
    v: &FieldOnMesh,
    h: &FieldOnMesh,
) -> Result<f64> {
    let n = mesh.n_nodes();
    for (field, what) in [(u, "u"), (v, "v"), (h, "h")] {
        if field.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: field.len(),
                context: match what {
                    "u" => "gradient_coupling u",
                    "v" => "gradient_coupling v",
                    _ => "gradient_coupling h",
                },
            });
        }
    }
    let mut total = 0.0;
    for tri in mesh.triangles.iter() {
        let (grads, area) = p1_gradients([
            mesh.nodes[tri[0]],
            mesh.nodes[tri[1]],
            mesh.nodes[tri[2]],
        ]);
        let mut gu = [0.0_f64; 2];
        let mut gv = [0.0_f64; 2];
        for i in 0..3 {
            gu[0] += u.0[tri[i]] * grads[i][0];
            gu[1] += u.0[tri[i]] * grads[i][1];
            gv[0] += v.0[tri[i]] * grads[i][0];
            gv[1] += v.0[tri[i]] * grads[i][1];
        }
        let hbar = (h.0[tri[0]] + h.0[tri[1]] + h.0[tri[2]]) / 3.0;
        total += (gu[0] * gv[0] + gu[1] * gv[1]) * area * hbar;
    }
    Ok(total)
}
